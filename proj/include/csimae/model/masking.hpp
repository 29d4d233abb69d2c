// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "csimae/core/rng.hpp"
#include "csimae/model/patchify.hpp"

namespace csimae {

enum class MaskStrategy { Random, Dimension, Pilot, Block };

inline std::string strategy_to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::Random: return "random";
        case MaskStrategy::Dimension: return "dimension";
        case MaskStrategy::Pilot: return "pilot";
        case MaskStrategy::Block: return "block";
    }
    return "?";
}

inline MaskStrategy strategy_from_string(const std::string& s) {
    if (s == "random") return MaskStrategy::Random;
    if (s == "dimension") return MaskStrategy::Dimension;
    if (s == "pilot") return MaskStrategy::Pilot;
    if (s == "block") return MaskStrategy::Block;
    throw std::invalid_argument("unknown masking strategy: " + s);
}

enum class MaskAxis { Time, Frequency, Space };

/// Disjoint partition of the patch index set. `masked` and `observed` are
/// sorted ascending and together enumerate [0, n_total).
struct MaskPlan {
    MaskStrategy strategy = MaskStrategy::Random;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::size_t n_total = 0;
    std::vector<std::size_t> masked;
    std::vector<std::size_t> observed;
    // axis-aligned cuboids (t0,f0,s0,dt,df,ds) recorded by the block strategy
    std::vector<std::array<std::size_t, 6>> block_cuboids;

    void finalize(std::vector<bool>& is_masked) {
        masked.clear();
        observed.clear();
        for (std::size_t i = 0; i < is_masked.size(); ++i)
            (is_masked[i] ? masked : observed).push_back(i);
        n_total = is_masked.size();
    }
};

/// Uniform masking without replacement: |masked| = round(ratio * N_p).
inline MaskPlan mask_random(const PatchGrid& grid, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask_random: ratio must be in [0, 1)");
    const std::size_t n = grid.num_patches();
    const std::size_t m = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    if (m >= n) throw std::invalid_argument("mask_random: ratio leaves no visible tokens");

    Rng rng(Rng::mix(seed, 0x7a5d01));
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<bool> mask(n, false);
    for (std::size_t i = 0; i < m; ++i) mask[pool[i]] = true;

    MaskPlan plan;
    plan.strategy = MaskStrategy::Random;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.finalize(mask);
    return plan;
}

/// Mask a contiguous run of whole slabs along one patch axis. All patches in
/// a masked slab are masked; the run covers round(ratio * extent) slabs.
inline MaskPlan mask_dimension(const PatchGrid& grid, MaskAxis axis, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask_dimension: ratio must be in [0, 1]");
    const std::size_t gl = grid.grid_l(), gk = grid.grid_k(), gs = grid.grid_s();
    const std::size_t extent = axis == MaskAxis::Time ? gl : axis == MaskAxis::Frequency ? gk : gs;
    if (extent < 2) throw std::invalid_argument("mask_dimension: axis extent must be >= 2");
    const std::size_t run = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(extent)));
    if (run > extent) throw std::invalid_argument("mask_dimension: run longer than the axis");
    if (run == extent) throw std::invalid_argument("mask_dimension: run would leave no visible tokens");

    Rng rng(Rng::mix(seed, 0xd19e4c));
    const std::size_t start = run == 0 ? 0 : static_cast<std::size_t>(rng.below(extent - run + 1));

    std::vector<bool> mask(grid.num_patches(), false);
    for (std::size_t t = 0; t < gl; ++t)
        for (std::size_t f = 0; f < gk; ++f)
            for (std::size_t s = 0; s < gs; ++s) {
                const std::size_t c = axis == MaskAxis::Time ? t : axis == MaskAxis::Frequency ? f : s;
                if (c >= start && c < start + run) mask[patch_index(grid, t, f, s)] = true;
            }

    MaskPlan plan;
    plan.strategy = MaskStrategy::Dimension;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.finalize(mask);
    return plan;
}

/// Fixed pilot pattern: the patch grid is tiled by 2x2x2 cubes and only the
/// (0,0,0) corner of each cube stays observed, i.e. |observed| = N_p / 8.
inline MaskPlan mask_pilot(const PatchGrid& grid) {
    auto check_even = [](std::size_t extent, const char* axis) {
        if (extent % 2 != 0)
            throw std::invalid_argument(std::string("mask_pilot: ") + axis + " patch extent " +
                                        std::to_string(extent) + " is odd; the 2x2x2 pilot tiling needs even extents");
    };
    check_even(grid.grid_l(), "time");
    check_even(grid.grid_k(), "frequency");
    check_even(grid.grid_s(), "space");

    std::vector<bool> mask(grid.num_patches(), false);
    for (std::size_t t = 0; t < grid.grid_l(); ++t)
        for (std::size_t f = 0; f < grid.grid_k(); ++f)
            for (std::size_t s = 0; s < grid.grid_s(); ++s)
                if (t % 2 != 0 || f % 2 != 0 || s % 2 != 0) mask[patch_index(grid, t, f, s)] = true;

    MaskPlan plan;
    plan.strategy = MaskStrategy::Pilot;
    plan.ratio = 0.875;
    plan.seed = 0;
    plan.finalize(mask);
    return plan;
}

/// Volumetric masking: draw axis-aligned cuboids (edge lengths uniform in
/// [1, extent/2], clipped to the grid) until the masked fraction reaches
/// `ratio`. If the cuboids happen to cover everything, the lowest index is
/// forced back to observed so the encoder always sees at least one token.
inline MaskPlan mask_block(const PatchGrid& grid, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask_block: ratio must be in (0, 1)");
    const std::size_t gl = grid.grid_l(), gk = grid.grid_k(), gs = grid.grid_s();
    const std::size_t n = grid.num_patches();
    Rng rng(Rng::mix(seed, 0xb10c6));

    std::vector<bool> mask(n, false);
    std::size_t covered = 0;
    MaskPlan plan;
    plan.strategy = MaskStrategy::Block;
    plan.ratio = ratio;
    plan.seed = seed;

    auto edge = [&rng](std::size_t extent) {
        const std::size_t hi = std::max<std::size_t>(1, extent / 2);
        return 1 + static_cast<std::size_t>(rng.below(hi));
    };
    const std::size_t target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
    std::size_t guard = 0;
    while (covered < target && ++guard < 100000) {
        const std::size_t dt = edge(gl), df = edge(gk), ds = edge(gs);
        const std::size_t t0 = static_cast<std::size_t>(rng.below(gl));
        const std::size_t f0 = static_cast<std::size_t>(rng.below(gk));
        const std::size_t s0 = static_cast<std::size_t>(rng.below(gs));
        const std::size_t t1 = std::min(gl, t0 + dt), f1 = std::min(gk, f0 + df), s1 = std::min(gs, s0 + ds);
        plan.block_cuboids.push_back({t0, f0, s0, t1 - t0, f1 - f0, s1 - s0});
        for (std::size_t t = t0; t < t1; ++t)
            for (std::size_t f = f0; f < f1; ++f)
                for (std::size_t s = s0; s < s1; ++s) {
                    const std::size_t ix = patch_index(grid, t, f, s);
                    if (!mask[ix]) {
                        mask[ix] = true;
                        ++covered;
                    }
                }
    }
    if (covered == n) mask[0] = false;  // visible floor of one token

    plan.finalize(mask);
    return plan;
}

/// Linearly ramped curriculum masking ratio, clamped at the endpoints.
struct CurriculumSchedule {
    double start_ratio = 0.50;
    double end_ratio = 0.75;
    std::size_t total_steps = 1;

    void validate() const {
        if (!(start_ratio >= 0.0 && start_ratio <= 1.0 && end_ratio >= 0.0 && end_ratio <= 1.0))
            throw std::invalid_argument("curriculum: ratios must lie in [0, 1]");
        if (end_ratio < start_ratio) throw std::invalid_argument("curriculum: schedule must be non-decreasing");
        if (total_steps == 0) throw std::invalid_argument("curriculum: total steps must be positive");
    }
};

inline double curriculum_ratio(const CurriculumSchedule& s, std::size_t step) {
    s.validate();
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(s.total_steps));
    return s.start_ratio + (s.end_ratio - s.start_ratio) * frac;
}

/// Pick a masking strategy for this step; uniform over the four strategies by
/// default, weights configurable. Deterministic under (step, seed).
inline MaskStrategy sample_strategy(std::size_t step, std::uint64_t seed,
                                    const std::array<double, 4>& weights = {1.0, 1.0, 1.0, 1.0}) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("sample_strategy: negative weight");
        total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("sample_strategy: all strategy weights are zero");
    Rng rng(Rng::mix(seed, 0x57ae9 + step));
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < 4; ++i) {
        if (u < weights[i] || i == 3) return static_cast<MaskStrategy>(i);
        u -= weights[i];
    }
    return MaskStrategy::Block;
}

/// Build a plan for the drawn strategy. The dimension strategy additionally
/// draws its axis (uniform over axes with extent >= 2) from the same seed.
inline MaskPlan make_plan(MaskStrategy strategy, const PatchGrid& grid, double ratio, std::uint64_t seed) {
    switch (strategy) {
        case MaskStrategy::Random: return mask_random(grid, ratio, seed);
        case MaskStrategy::Pilot: return mask_pilot(grid);
        case MaskStrategy::Block: return mask_block(grid, ratio, seed);
        case MaskStrategy::Dimension: {
            std::vector<MaskAxis> axes;
            if (grid.grid_l() >= 2) axes.push_back(MaskAxis::Time);
            if (grid.grid_k() >= 2) axes.push_back(MaskAxis::Frequency);
            if (grid.grid_s() >= 2) axes.push_back(MaskAxis::Space);
            if (axes.empty()) throw std::invalid_argument("mask_dimension: no axis has extent >= 2");
            Rng rng(Rng::mix(seed, 0xa815));
            return mask_dimension(grid, axes[rng.below(axes.size())], ratio, seed);
        }
    }
    throw std::invalid_argument("unknown masking strategy");
}

// --- serialization (strategy tag, ratio, seed, and a replay bitmap) ---------

inline nlohmann::ordered_json mask_plan_to_json(const MaskPlan& p) {
    std::string bitmap(p.n_total, '0');
    for (auto i : p.masked) bitmap[i] = '1';
    nlohmann::ordered_json j;
    j["strategy"] = strategy_to_string(p.strategy);
    j["ratio"] = p.ratio;
    j["seed"] = p.seed;
    j["n"] = p.n_total;
    j["bitmap"] = bitmap;
    return j;
}

inline MaskPlan mask_plan_from_json(const nlohmann::json& j) {
    MaskPlan p;
    p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    p.ratio = j.at("ratio").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    const std::string bitmap = j.at("bitmap").get<std::string>();
    if (bitmap.size() != j.at("n").get<std::size_t>())
        throw std::invalid_argument("mask plan: bitmap length does not match n");
    std::vector<bool> mask(bitmap.size());
    for (std::size_t i = 0; i < bitmap.size(); ++i) mask[i] = bitmap[i] == '1';
    p.finalize(mask);
    return p;
}

}  // namespace csimae
