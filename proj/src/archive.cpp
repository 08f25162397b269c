#include "hvm/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace hvm {

namespace {

constexpr char kMagic[8] = {'H', 'V', 'M', 'A', 'R', 'C', 'H', '1'};

template <typename T>
void append_le(std::vector<std::byte>& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<std::byte, sizeof(T)> raw{};
    std::memcpy(raw.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    out.insert(out.end(), raw.begin(), raw.end());
}

template <typename T>
T read_le(std::span<const std::byte> in, std::size_t offset) {
    if (offset + sizeof(T) > in.size()) throw FormatError("read past end of buffer");
    std::array<std::byte, sizeof(T)> raw{};
    std::memcpy(raw.data(), in.data() + offset, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw FormatError("negative dimension in shape");
        n *= d;
    }
    return n;
}

std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "i32"; }

}  // namespace

FormatError::FormatError(const std::string& what, std::optional<std::size_t> record)
    : std::runtime_error(record ? what + " (record " + std::to_string(*record) + ")" : what), record_(record) {}

std::int64_t NamedArray::numel() const { return shape_numel(shape); }

void Archive::add(std::string name, std::vector<std::int64_t> shape, std::vector<float> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw std::invalid_argument("archive array '" + name + "': shape does not match value count");
    if (contains(name)) throw std::invalid_argument("archive array '" + name + "' already present");
    NamedArray a;
    a.name = std::move(name);
    a.dtype = DType::f32;
    a.shape = std::move(shape);
    a.f32 = std::move(values);
    arrays_.push_back(std::move(a));
}

void Archive::add(std::string name, std::vector<std::int64_t> shape, std::vector<std::int32_t> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw std::invalid_argument("archive array '" + name + "': shape does not match value count");
    if (contains(name)) throw std::invalid_argument("archive array '" + name + "' already present");
    NamedArray a;
    a.name = std::move(name);
    a.dtype = DType::i32;
    a.shape = std::move(shape);
    a.i32 = std::move(values);
    arrays_.push_back(std::move(a));
}

bool Archive::contains(std::string_view name) const {
    for (const auto& a : arrays_)
        if (a.name == name) return true;
    return false;
}

const NamedArray& Archive::at(std::string_view name) const {
    for (const auto& a : arrays_)
        if (a.name == name) return a;
    throw FormatError("archive has no array named '" + std::string(name) + "'");
}

std::vector<std::byte> Archive::serialize() const {
    nlohmann::json header;
    header["meta"] = meta;
    header["arrays"] = nlohmann::json::array();
    std::vector<std::byte> payload;
    for (const auto& a : arrays_) {
        const std::size_t offset = payload.size();
        if (a.dtype == DType::f32) {
            append_f32s(payload, a.f32);
        } else {
            for (auto v : a.i32) append_le<std::int32_t>(payload, v);
        }
        header["arrays"].push_back({{"name", a.name},
                                    {"dtype", dtype_name(a.dtype)},
                                    {"shape", a.shape},
                                    {"offset", offset},
                                    {"nbytes", payload.size() - offset}});
    }
    const std::string text = header.dump();
    std::vector<std::byte> out;
    out.reserve(16 + text.size() + payload.size());
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    append_u64(out, text.size());
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Archive Archive::deserialize(std::span<const std::byte> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("bad archive magic");
    const std::uint64_t header_len = read_u64(bytes, 8);
    if (16 + header_len > bytes.size()) throw FormatError("archive header truncated");
    const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), header_len);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("archive header is not valid JSON: ") + e.what());
    }
    const auto payload = bytes.subspan(16 + header_len);

    Archive ar;
    try {
        ar.meta = header.at("meta");
        for (const auto& entry : header.at("arrays")) {
            const auto name = entry.at("name").get<std::string>();
            const auto dtype = entry.at("dtype").get<std::string>();
            auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
            const auto n = static_cast<std::uint64_t>(shape_numel(shape));
            if (n * 4 != nbytes) throw FormatError("array '" + name + "': byte count does not match shape");
            if (offset + nbytes > payload.size()) throw FormatError("array '" + name + "' truncated");
            if (dtype == "f32") {
                std::vector<float> values(n);
                for (std::uint64_t i = 0; i < n; ++i) values[i] = read_f32(payload, offset + 4 * i);
                ar.add(name, std::move(shape), std::move(values));
            } else if (dtype == "i32") {
                std::vector<std::int32_t> values(n);
                for (std::uint64_t i = 0; i < n; ++i) values[i] = read_le<std::int32_t>(payload, offset + 4 * i);
                ar.add(name, std::move(shape), std::move(values));
            } else {
                throw FormatError("array '" + name + "': unknown dtype " + dtype);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("archive header malformed: ") + e.what());
    }
    return ar;
}

void Archive::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Archive Archive::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

void append_u32(std::vector<std::byte>& out, std::uint32_t v) { append_le(out, v); }
void append_u64(std::vector<std::byte>& out, std::uint64_t v) { append_le(out, v); }
void append_f32(std::vector<std::byte>& out, float v) { append_le(out, v); }

void append_f32s(std::vector<std::byte>& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        const auto* p = reinterpret_cast<const std::byte*>(values.data());
        out.insert(out.end(), p, p + values.size_bytes());
    } else {
        for (float v : values) append_le(out, v);
    }
}

std::uint32_t read_u32(std::span<const std::byte> in, std::size_t offset) { return read_le<std::uint32_t>(in, offset); }
std::uint64_t read_u64(std::span<const std::byte> in, std::size_t offset) { return read_le<std::uint64_t>(in, offset); }
float read_f32(std::span<const std::byte> in, std::size_t offset) { return read_le<float>(in, offset); }

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::byte> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!f) throw std::runtime_error("short read on " + path.string());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write on " + path.string());
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view text) {
    return fnv1a64(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::uint64_t fnv1a64(std::span<const float> values) {
    std::vector<std::byte> bytes;
    bytes.reserve(values.size_bytes());
    append_f32s(bytes, values);
    return fnv1a64(bytes);
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

}  // namespace hvm
