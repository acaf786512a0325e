#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/diffcore/tensor.hpp"

// Little-endian tensor container shared by checkpoints and prompt banks:
//
//   "DIPT" | version:u32
//   repeated until EOF:
//     name_len:u32 | name:utf8[name_len] | rank:u32 | dims:u32[rank] | payload:f32[prod(dims)]

namespace dipt {

inline constexpr std::array<char, 4> kContainerMagic{'D', 'I', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 8;

class ContainerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const NamedArray&) const = default;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                           static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    os.write(bytes, 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char bytes[4];
    if (!is.read(reinterpret_cast<char*>(bytes), 4)) return false;
    v = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
        (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
    return true;
}

}  // namespace detail

/// Serialized size of one record.
inline std::size_t record_bytes(const NamedArray& a) {
    return 4 + a.name.size() + 4 + 4 * a.shape.size() + 4 * a.values.size();
}

inline std::size_t container_bytes(std::span<const NamedArray> arrays) {
    std::size_t total = kContainerHeaderBytes;
    for (const auto& a : arrays) total += record_bytes(a);
    return total;
}

inline void write_container(std::ostream& os, std::span<const NamedArray> arrays) {
    os.write(kContainerMagic.data(), 4);
    detail::put_u32(os, kContainerVersion);
    for (const auto& a : arrays) {
        if (numel(a.shape) != a.values.size()) {
            throw ContainerError("container: '" + a.name + "' has shape " + to_string(a.shape) + " but " +
                                 std::to_string(a.values.size()) + " values");
        }
        detail::put_u32(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (float v : a.values) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
    }
    if (!os) throw ContainerError("container: write failed");
}

inline std::vector<NamedArray> read_container(std::istream& is) {
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kContainerMagic) throw ContainerError("container: bad magic");
    std::uint32_t version = 0;
    if (!detail::get_u32(is, version) || version != kContainerVersion) {
        throw ContainerError("container: unsupported version " + std::to_string(version));
    }
    std::vector<NamedArray> out;
    std::uint32_t name_len = 0;
    while (detail::get_u32(is, name_len)) {
        NamedArray a;
        a.name.resize(name_len);
        std::uint32_t rank = 0;
        if (!is.read(a.name.data(), name_len) || !detail::get_u32(is, rank)) {
            throw ContainerError("container: truncated record header");
        }
        a.shape.resize(rank);
        for (auto& d : a.shape) {
            std::uint32_t v = 0;
            if (!detail::get_u32(is, v)) throw ContainerError("container: truncated dims for '" + a.name + "'");
            d = v;
        }
        a.values.resize(numel(a.shape));
        for (auto& v : a.values) {
            std::uint32_t bits = 0;
            if (!detail::get_u32(is, bits)) throw ContainerError("container: truncated payload for '" + a.name + "'");
            v = std::bit_cast<float>(bits);
        }
        out.push_back(std::move(a));
    }
    return out;
}

inline void save_container(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContainerError("container: cannot open " + path.string() + " for writing");
    write_container(os, arrays);
}

inline std::vector<NamedArray> load_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContainerError("container: cannot open " + path.string());
    return read_container(is);
}

inline const NamedArray& find_array(std::span<const NamedArray> arrays, const std::string& name) {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw ContainerError("container: missing tensor '" + name + "'");
}

template <class T>
NamedArray to_named_array(std::string name, const BasicTensor<T>& t) {
    return NamedArray{std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

template <class T>
BasicTensor<T> to_tensor(const NamedArray& a, bool requires_grad = false) {
    return BasicTensor<T>(a.shape, std::vector<T>(a.values.begin(), a.values.end()), requires_grad);
}

/// FNV-1a over the raw bytes of a sequence of float buffers.
inline std::uint64_t checksum(std::span<const float> values, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (float v : values) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) {
            h ^= (bits >> (8 * i)) & 0xFF;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace dipt
