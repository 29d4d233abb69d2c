// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "csimae/core/autodiff.hpp"
#include "csimae/core/tensor.hpp"

namespace csimae {

/// Non-overlapping 3D partition of the [L, K, Ns, 2] tensor. Patch sizes must
/// divide the grid extents exactly.
struct PatchGrid {
    std::size_t patch_l = 1, patch_k = 1, patch_s = 1;
    std::size_t extent_l = 1, extent_k = 1, extent_s = 1;

    PatchGrid() = default;
    PatchGrid(std::size_t pl, std::size_t pk, std::size_t ps, std::size_t l, std::size_t k, std::size_t s)
        : patch_l(pl), patch_k(pk), patch_s(ps), extent_l(l), extent_k(k), extent_s(s) {
        validate();
    }

    void validate() const {
        auto check = [](std::size_t extent, std::size_t patch, const char* axis) {
            if (patch == 0) throw std::invalid_argument(std::string("patch grid: zero patch size on ") + axis + " axis");
            if (extent % patch != 0)
                throw std::invalid_argument(std::string("patch grid: ") + axis + " extent " + std::to_string(extent) +
                                            " not divisible by patch size " + std::to_string(patch));
        };
        check(extent_l, patch_l, "time");
        check(extent_k, patch_k, "frequency");
        check(extent_s, patch_s, "space");
    }

    std::size_t grid_l() const { return extent_l / patch_l; }
    std::size_t grid_k() const { return extent_k / patch_k; }
    std::size_t grid_s() const { return extent_s / patch_s; }
    std::size_t num_patches() const { return grid_l() * grid_k() * grid_s(); }
    std::size_t payload_dim() const { return patch_l * patch_k * patch_s * 2; }
};

struct PatchCoord {
    std::size_t t = 0, f = 0, s = 0;
    bool operator==(const PatchCoord&) const = default;
};

/// Patch index in the fixed lexicographic (t, f, s) enumeration.
inline std::size_t patch_index(const PatchGrid& g, std::size_t t, std::size_t f, std::size_t s) {
    return (t * g.grid_k() + f) * g.grid_s() + s;
}

inline std::vector<PatchCoord> patch_coords(const PatchGrid& g) {
    std::vector<PatchCoord> out;
    out.reserve(g.num_patches());
    for (std::size_t t = 0; t < g.grid_l(); ++t)
        for (std::size_t f = 0; f < g.grid_k(); ++f)
            for (std::size_t s = 0; s < g.grid_s(); ++s) out.push_back({t, f, s});
    return out;
}

/// Partition x into patch payloads [N_p, E]. Bijective: every input scalar
/// lands in exactly one payload; within a patch the flattening order is
/// (t, f, s, re/im) lexicographic.
inline Tensor<double> slice_patches(const Tensor<double>& x, const PatchGrid& g) {
    g.validate();
    const Shape expect{g.extent_l, g.extent_k, g.extent_s, 2};
    if (x.shape() != expect)
        throw std::invalid_argument("slice_patches: tensor shape " + shape_str(x.shape()) + " does not match grid " +
                                    shape_str(expect));
    Tensor<double> out({g.num_patches(), g.payload_dim()});
    const double* px = x.raw();
    double* po = out.raw();
    const std::size_t sk = g.extent_s * 2;           // stride of k index
    const std::size_t sl = g.extent_k * sk;          // stride of l index
    std::size_t patch = 0;
    for (std::size_t pt = 0; pt < g.grid_l(); ++pt)
        for (std::size_t pf = 0; pf < g.grid_k(); ++pf)
            for (std::size_t ps = 0; ps < g.grid_s(); ++ps, ++patch) {
                double* dst = po + patch * g.payload_dim();
                for (std::size_t dt = 0; dt < g.patch_l; ++dt)
                    for (std::size_t df = 0; df < g.patch_k; ++df) {
                        const double* src =
                            px + (pt * g.patch_l + dt) * sl + (pf * g.patch_k + df) * sk + ps * g.patch_s * 2;
                        for (std::size_t ds = 0; ds < g.patch_s * 2; ++ds) *dst++ = src[ds];
                    }
            }
    return out;
}

/// Inverse of slice_patches (bit-exact round trip).
inline Tensor<double> unslice_patches(const Tensor<double>& payloads, const PatchGrid& g) {
    g.validate();
    const Shape expect{g.num_patches(), g.payload_dim()};
    if (payloads.shape() != expect)
        throw std::invalid_argument("unslice_patches: payload shape " + shape_str(payloads.shape()) +
                                    " does not match grid " + shape_str(expect));
    Tensor<double> out({g.extent_l, g.extent_k, g.extent_s, 2});
    const double* po = payloads.raw();
    double* px = out.raw();
    const std::size_t sk = g.extent_s * 2;
    const std::size_t sl = g.extent_k * sk;
    std::size_t patch = 0;
    for (std::size_t pt = 0; pt < g.grid_l(); ++pt)
        for (std::size_t pf = 0; pf < g.grid_k(); ++pf)
            for (std::size_t ps = 0; ps < g.grid_s(); ++ps, ++patch) {
                const double* src = po + patch * g.payload_dim();
                for (std::size_t dt = 0; dt < g.patch_l; ++dt)
                    for (std::size_t df = 0; df < g.patch_k; ++df) {
                        double* dst =
                            px + (pt * g.patch_l + dt) * sl + (pf * g.patch_k + df) * sk + ps * g.patch_s * 2;
                        for (std::size_t ds = 0; ds < g.patch_s * 2; ++ds) dst[ds] = *src++;
                    }
            }
    return out;
}

// ---------------------------------------------------------------------------
// 3D rotary positional encoding. The feature vector splits into three
// contiguous thirds (time, frequency, space); within each third, consecutive
// scalar pairs (2k, 2k+1) rotate by pos * omega_k.
// ---------------------------------------------------------------------------

/// omega_k = 10000^(-2k / (dim/6)) for k in [0, dim/6). Strictly decreasing
/// from 1. `dim` must be divisible by 6.
inline std::vector<double> rope_frequencies(std::size_t dim) {
    if (dim == 0 || dim % 6 != 0)
        throw std::invalid_argument("rope: feature dimension " + std::to_string(dim) + " is not divisible by 6");
    const std::size_t n = dim / 6;
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k)
        out[k] = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(n));
    return out;
}

namespace detail {

template <typename T>
void rope_rotate_buffer(T* data, std::size_t rows, std::size_t cols, std::size_t group_dim,
                        const std::vector<PatchCoord>& coords, std::size_t skip_rows,
                        const std::vector<double>& freqs, bool inverse) {
    const std::size_t third = group_dim / 3;
    const std::size_t pairs = third / 2;
    const std::size_t groups = cols / group_dim;
    for (std::size_t r = skip_rows; r < rows; ++r) {
        const PatchCoord& c = coords[r - skip_rows];
        const double pos[3] = {static_cast<double>(c.t), static_cast<double>(c.f), static_cast<double>(c.s)};
        T* row = data + r * cols;
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t axis = 0; axis < 3; ++axis) {
                T* blk = row + g * group_dim + axis * third;
                for (std::size_t k = 0; k < pairs; ++k) {
                    double ang = pos[axis] * freqs[k];
                    if (inverse) ang = -ang;
                    const T cs = static_cast<T>(std::cos(ang));
                    const T sn = static_cast<T>(std::sin(ang));
                    const T x1 = blk[2 * k], x2 = blk[2 * k + 1];
                    blk[2 * k] = cs * x1 - sn * x2;
                    blk[2 * k + 1] = sn * x1 + cs * x2;
                }
            }
    }
}

}  // namespace detail

/// Rotate token features by their 3D grid coordinates. `x` is [rows, cols]
/// where cols is a multiple of group_dim (one group per attention head;
/// group_dim == cols for embedding-level injection). Rows below skip_rows
/// (meta tokens) are position-free and pass through untouched. Norm-preserving
/// by construction; gradients rotate back through the transpose.
template <typename T>
Var<T> rope3d(const Var<T>& x, const std::vector<PatchCoord>& coords, std::size_t group_dim,
              std::size_t skip_rows = 0) {
    if (x.rank() != 2) throw std::invalid_argument("rope3d: expected a [rows, cols] tensor");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (group_dim == 0 || cols % group_dim != 0)
        throw std::invalid_argument("rope3d: cols " + std::to_string(cols) + " not a multiple of group dim " +
                                    std::to_string(group_dim));
    const auto freqs = rope_frequencies(group_dim);
    if (skip_rows > rows) throw std::invalid_argument("rope3d: skip_rows exceeds row count");
    if (coords.size() != rows - skip_rows)
        throw std::invalid_argument("rope3d: have " + std::to_string(coords.size()) + " coordinates for " +
                                    std::to_string(rows - skip_rows) + " position-bearing tokens");

    Tensor<T> out = x.value();
    detail::rope_rotate_buffer(out.raw(), rows, cols, group_dim, coords, skip_rows, freqs, false);
    if (!detail::any_tracked<T>(x)) return Var<T>::leaf(std::move(out));
    auto xn = x.node();
    return detail::make_result<T>(std::move(out), {xn},
                                  [xn, rows, cols, group_dim, coords, skip_rows, freqs](const Tensor<T>& g) {
                                      Tensor<T> gx = g;
                                      detail::rope_rotate_buffer(gx.raw(), rows, cols, group_dim, coords, skip_rows,
                                                                 freqs, true);
                                      xn->accumulate(gx);
                                  });
}

/// Ordered patch embeddings with their pre-masking grid coordinates.
template <typename T>
struct PatchSequence {
    Var<T> embeddings;               // [N_p, D]
    std::vector<PatchCoord> coords;  // lexicographic (t, f, s)
    std::size_t payload_dim = 0;     // E = P_L * P_K * P_s * 2
};

template <typename T>
PatchSequence<T> apply_3d_rope(const PatchSequence<T>& seq) {
    if (seq.coords.size() != seq.embeddings.shape().at(0))
        throw std::invalid_argument("apply_3d_rope: sequence is missing coordinates");
    PatchSequence<T> out;
    out.embeddings = rope3d(seq.embeddings, seq.coords, seq.embeddings.shape().at(1));
    out.coords = seq.coords;
    out.payload_dim = seq.payload_dim;
    return out;
}

}  // namespace csimae
