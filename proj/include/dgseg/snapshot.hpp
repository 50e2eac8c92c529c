#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "dgseg/tensor.hpp"

namespace dgseg {

// Tensor snapshot: "DGT1", u32 rank, u32 dims[rank], f64 payload (row-major),
// all little-endian.

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw std::runtime_error("snapshot: truncated input");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

}  // namespace detail

template <typename T>
void write_snapshot(std::ostream& os, const Tensor<T>& t) {
    os.write("DGT1", 4);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (T v : t.data()) detail::put_le<double>(os, static_cast<double>(v));
}

template <typename T>
Tensor<T> read_snapshot(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DGT1", 4) != 0) throw std::runtime_error("snapshot: bad magic");
    const auto rank = detail::get_le<std::uint32_t>(is);
    if (rank > 16) throw std::runtime_error("snapshot: implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint32_t>(is);
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(detail::get_le<double>(is));
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_snapshot(const std::filesystem::path& p, const Tensor<T>& t) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    write_snapshot(os, t);
}

template <typename T>
Tensor<T> load_snapshot(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    return read_snapshot<T>(is);
}

}  // namespace dgseg
