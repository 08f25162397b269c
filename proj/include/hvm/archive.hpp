#pragma once

// Named-array binary container shared by bodies, clips and checkpoints.
//
// Layout (all integers little-endian):
//   8 bytes   magic "HVMARCH1"
//   u64       header length in bytes
//   header    UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
//   payload   concatenated array bodies; offsets are relative to the payload start

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace hvm {

// Malformed or truncated file. `record()` names the offending record when the
// container holds several (datasets).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what, std::optional<std::size_t> record = std::nullopt);
    std::optional<std::size_t> record() const { return record_; }

private:
    std::optional<std::size_t> record_;
};

enum class DType { f32, i32 };

struct NamedArray {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::int64_t> shape;
    std::vector<float> f32;
    std::vector<std::int32_t> i32;

    std::int64_t numel() const;
};

class Archive {
public:
    nlohmann::json meta = nlohmann::json::object();

    void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> values);
    void add(std::string name, std::vector<std::int64_t> shape, std::vector<std::int32_t> values);

    bool contains(std::string_view name) const;
    const NamedArray& at(std::string_view name) const;
    const std::vector<NamedArray>& arrays() const { return arrays_; }

    std::vector<std::byte> serialize() const;
    static Archive deserialize(std::span<const std::byte> bytes);

    void save(const std::filesystem::path& path) const;
    static Archive load(const std::filesystem::path& path);

private:
    std::vector<NamedArray> arrays_;
};

// Little-endian primitives used by every binary format in the project.
void append_u32(std::vector<std::byte>& out, std::uint32_t v);
void append_u64(std::vector<std::byte>& out, std::uint64_t v);
void append_f32(std::vector<std::byte>& out, float v);
void append_f32s(std::vector<std::byte>& out, std::span<const float> values);
std::uint32_t read_u32(std::span<const std::byte> in, std::size_t offset);
std::uint64_t read_u64(std::span<const std::byte> in, std::size_t offset);
float read_f32(std::span<const std::byte> in, std::size_t offset);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

// 64-bit FNV-1a; used for checksums and config hashes.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t fnv1a64(std::span<const float> values);
std::string hex64(std::uint64_t v);

}  // namespace hvm
