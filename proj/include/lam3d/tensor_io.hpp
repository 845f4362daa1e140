#pragma once

// "LAM3DT01" container: 8-byte magic, u32 LE rank, rank x u32 LE extents,
// then the payload as LE float32 in row-major order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "lam3d/tensor.hpp"

namespace lam3d {

inline constexpr std::array<char, 8> tensor_magic{'L', 'A', 'M', '3', 'D', 'T', '0', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated tensor header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(tensor_magic.data(), tensor_magic.size());
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
    if (!os) throw IoError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& is) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != tensor_magic) throw IoError("bad tensor magic");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank == 0 || rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
        e = detail::get_u32(is);
        if (e == 0) throw IoError("zero tensor extent");
    }
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(detail::get_u32(is));
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_tensor(is);
}

// FNV-1a over the serialized bytes; used to prove frozen weights stay frozen.
inline std::uint64_t tensor_hash(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : os.str()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace lam3d
