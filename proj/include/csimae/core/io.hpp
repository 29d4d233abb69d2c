// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "csimae/core/tensor.hpp"

namespace csimae {

// Binary tensor file, shared by datasets and checkpoints:
//   magic "CHT1" | u32 rank | rank x u64 dims | row-major f64 payload,
// all fields little-endian.

namespace detail {

inline void require_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    if (b != 1) throw std::runtime_error("cht: big-endian hosts are not supported");
}

}  // namespace detail

inline void write_cht(const std::string& path, const Tensor<double>& t) {
    detail::require_little_endian();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cht: cannot open for writing: " + path);
    f.write("CHT1", 4);
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), sizeof rank);
    for (std::size_t i = 0; i < t.rank(); ++i) {
        const std::uint64_t d = t.shape()[i];
        f.write(reinterpret_cast<const char*>(&d), sizeof d);
    }
    f.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("cht: short write: " + path);
}

inline Tensor<double> read_cht(const std::string& path) {
    detail::require_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cht: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CHT1", 4) != 0)
        throw std::runtime_error("cht: bad magic in " + path);
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), sizeof rank);
    if (!f || rank == 0 || rank > 64) throw std::runtime_error("cht: bad rank in " + path);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint64_t d = 0;
        f.read(reinterpret_cast<char*>(&d), sizeof d);
        if (!f || d == 0) throw std::runtime_error("cht: bad dimension in " + path);
        shape[i] = static_cast<std::size_t>(d);
    }
    std::vector<double> data(shape_numel(shape));
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("cht: truncated payload in " + path);
    return Tensor<double>(std::move(shape), std::move(data));
}

}  // namespace csimae
