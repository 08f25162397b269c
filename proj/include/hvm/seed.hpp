#pragma once

#include <cstdint>

namespace hvm {

// Every random stream in a run is derived from one root seed:
//   seed(root, stream, index) = splitmix64(splitmix64(root + stream * G) + index * G)
// with G the 64-bit golden-ratio constant. Streams are fixed per component so that
// adding a consumer never shifts the seeds of existing ones.
enum class SeedStream : std::uint64_t {
    body = 1,
    data = 2,
    heldout_data = 3,
    motion_tokenizer = 4,
    video_tokenizer = 5,
    ar_model = 6,
    sampling = 7,
    evaluation = 8,
};

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t root, SeedStream stream, std::uint64_t index = 0) {
    const auto s = splitmix64(root + static_cast<std::uint64_t>(stream) * kGolden);
    return splitmix64(s + index * kGolden);
}

}  // namespace hvm
