// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles. Everything here is written independently of the library
// code paths it checks: straight loops, textbook formulas, no shared helpers.
#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <vector>

#include "csimae/core/autodiff.hpp"
#include "csimae/core/rng.hpp"
#include "csimae/core/tensor.hpp"
#include "csimae/sim/channel.hpp"

namespace oracle {

using csimae::Rng;
using csimae::Shape;
using csimae::Tensor;
using csimae::Var;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Plain triple-loop matrix product, 2D only.
inline Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<double> c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

// Direct exp/sum softmax over a flat vector.
inline std::vector<double> naive_softmax(const std::vector<double>& x) {
    std::vector<double> out(x.size());
    double denom = 0.0;
    for (double v : x) denom += std::exp(v);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]) / denom;
    return out;
}

// Central finite differences of a scalar-valued function of several leaf
// tensors, compared entry by entry against the analytic gradients.
//
// `f` must rebuild the graph from scratch on every call (the leaves' values
// are perturbed in place between calls).
struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline GradCheckResult grad_check(const std::function<Var<double>()>& f, std::vector<Var<double>>& leaves,
                                  double h = 1e-5) {
    Var<double> root = f();
    for (auto& leaf : leaves) leaf.zero_grad();
    csimae::backward(root);

    GradCheckResult res;
    for (auto& leaf : leaves) {
        Tensor<double> analytic = leaf.has_grad() ? leaf.grad() : Tensor<double>::zeros(leaf.shape());
        for (std::size_t i = 0; i < leaf.numel(); ++i) {
            double& slot = leaf.mutable_value().data()[i];
            const double keep = slot;
            slot = keep + h;
            const double up = f().value().scalar_value();
            slot = keep - h;
            const double dn = f().value().scalar_value();
            slot = keep;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[i];
            const double denom = std::max({1e-6, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

// Brute-force evaluation of the multipath channel sum at one (t, f, rx, tx)
// point, written from the formula with its own steering phases.
inline std::complex<double> eq1_point(const std::vector<csimae::PathParams>& paths,
                                      const csimae::ArrayGeometry& gtx, const csimae::ArrayGeometry& grx, double t,
                                      double f, std::size_t rx, std::size_t tx) {
    const double two_pi = 6.283185307179586476925286766559;
    std::complex<double> acc(0.0, 0.0);
    const std::size_t rx_h = rx / grx.n_v, rx_v = rx % grx.n_v;
    const std::size_t tx_h = tx / gtx.n_v, tx_v = tx % gtx.n_v;
    for (const auto& p : paths) {
        const double ph_rx = two_pi * grx.spacing_h * static_cast<double>(rx_h) * std::sin(p.theta_rx) * std::cos(p.phi_rx) +
                             two_pi * grx.spacing_v * static_cast<double>(rx_v) * std::sin(p.phi_rx);
        const double ph_tx = two_pi * gtx.spacing_h * static_cast<double>(tx_h) * std::sin(p.theta_tx) * std::cos(p.phi_tx) +
                             two_pi * gtx.spacing_v * static_cast<double>(tx_v) * std::sin(p.phi_tx);
        const std::complex<double> steer = std::polar(1.0, ph_rx) * std::conj(std::polar(1.0, ph_tx));
        const std::complex<double> rot = std::polar(1.0, -two_pi * f * p.delay_s) * std::polar(1.0, two_pi * p.doppler_hz * t);
        acc += p.gain * steer * rot;
    }
    return acc;
}

}  // namespace oracle
