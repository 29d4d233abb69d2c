// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "csimae/core/rng.hpp"
#include "csimae/core/tensor.hpp"

namespace csimae {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;
inline constexpr double kSpeedOfLight = 299792458.0;

/// One multipath component of the geometry-based channel.
struct PathParams {
    std::complex<double> gain;
    double theta_tx = 0.0;  // azimuth of departure, [-pi, pi]
    double phi_tx = 0.0;    // elevation of departure, [-pi/2, pi/2]
    double theta_rx = 0.0;  // azimuth of arrival
    double phi_rx = 0.0;    // elevation of arrival
    double delay_s = 0.0;   // >= 0
    double doppler_hz = 0.0;
};

/// Uniform planar array: n_h x n_v elements, spacing in wavelengths.
struct ArrayGeometry {
    std::size_t n_h = 1;
    std::size_t n_v = 1;
    double spacing_h = 0.5;
    double spacing_v = 0.5;

    std::size_t count() const { return n_h * n_v; }

    void validate() const {
        if (n_h == 0 || n_v == 0) throw std::invalid_argument("array geometry: element counts must be positive");
        if (spacing_h <= 0.0 || spacing_v <= 0.0)
            throw std::invalid_argument("array geometry: element spacing must be positive");
    }
};

/// Sampling grid of the CSI tensor: L time steps and K subcarriers.
struct CsiGrid {
    std::size_t time_steps = 1;   // L
    std::size_t subcarriers = 1;  // K
    double dt_s = 1e-3;           // time step
    double df_hz = 15e3;          // subcarrier spacing
    double t0_s = 0.0;
    double f0_hz = 0.0;  // absolute frequency of subcarrier 0
};

/// Real-valued CSI training tensor, shape [L, K, Ns, 2] with Ns = n_tx * n_rx.
/// The spatial axis is flattened rx-major: s = rx * n_tx + tx.
struct CsiTensor {
    Tensor<double> x;
    CsiGrid grid;
    std::size_t n_tx = 1;
    std::size_t n_rx = 1;

    std::size_t spatial() const { return n_tx * n_rx; }
};

inline void validate_angles(double theta, double phi) {
    if (!(theta >= -kPi && theta <= kPi))
        throw std::invalid_argument("steering: azimuth " + std::to_string(theta) + " outside [-pi, pi]");
    if (!(phi >= -kPi / 2 && phi <= kPi / 2))
        throw std::invalid_argument("steering: elevation " + std::to_string(phi) + " outside [-pi/2, pi/2]");
}

/// UPA steering vector a(theta, phi) = a_h(theta, phi) kron a_v(phi).
/// Per-axis phase progression: horizontal 2*pi*d_h*n*sin(theta)*cos(phi),
/// vertical 2*pi*d_v*m*sin(phi). Entries are unit modulus.
inline std::vector<std::complex<double>> steering_vector(const ArrayGeometry& geom, double theta, double phi) {
    geom.validate();
    validate_angles(theta, phi);
    const double kh = kTwoPi * geom.spacing_h * std::sin(theta) * std::cos(phi);
    const double kv = kTwoPi * geom.spacing_v * std::sin(phi);
    std::vector<std::complex<double>> ah(geom.n_h), av(geom.n_v), out(geom.count());
    for (std::size_t n = 0; n < geom.n_h; ++n) ah[n] = std::polar(1.0, kh * static_cast<double>(n));
    for (std::size_t m = 0; m < geom.n_v; ++m) av[m] = std::polar(1.0, kv * static_cast<double>(m));
    for (std::size_t n = 0; n < geom.n_h; ++n)
        for (std::size_t m = 0; m < geom.n_v; ++m) out[n * geom.n_v + m] = ah[n] * av[m];
    return out;
}

/// Sum of multipath components on the (time, frequency) grid, mapped to the
/// real-valued tensor. For each path p and grid point (t, f):
///   H(t,f) += g_p a_rx(theta,phi) a_tx(theta,phi)^H e^{-j 2 pi f tau_p} e^{j 2 pi nu_p t}.
inline CsiTensor generate_channel(const std::vector<PathParams>& paths, const CsiGrid& grid,
                                  const ArrayGeometry& geom_tx, const ArrayGeometry& geom_rx) {
    if (paths.empty()) throw std::invalid_argument("generate_channel: path list is empty");
    if (grid.time_steps == 0 || grid.subcarriers == 0)
        throw std::invalid_argument("generate_channel: grid extents must be >= 1");
    geom_tx.validate();
    geom_rx.validate();

    const std::size_t L = grid.time_steps, K = grid.subcarriers;
    const std::size_t ntx = geom_tx.count(), nrx = geom_rx.count();
    const std::size_t ns = ntx * nrx;

    std::vector<std::vector<std::complex<double>>> atx, arx;
    atx.reserve(paths.size());
    arx.reserve(paths.size());
    for (const auto& p : paths) {
        if (p.delay_s < 0.0) throw std::invalid_argument("generate_channel: negative path delay");
        atx.push_back(steering_vector(geom_tx, p.theta_tx, p.phi_tx));
        arx.push_back(steering_vector(geom_rx, p.theta_rx, p.phi_rx));
    }

    CsiTensor out;
    out.grid = grid;
    out.n_tx = ntx;
    out.n_rx = nrx;
    out.x = Tensor<double>({L, K, ns, 2});
    double* px = out.x.raw();

    std::vector<std::complex<double>> acc(ns);
    for (std::size_t l = 0; l < L; ++l) {
        const double t = grid.t0_s + static_cast<double>(l) * grid.dt_s;
        for (std::size_t k = 0; k < K; ++k) {
            const double f = grid.f0_hz + static_cast<double>(k) * grid.df_hz;
            std::fill(acc.begin(), acc.end(), std::complex<double>(0.0, 0.0));
            for (std::size_t p = 0; p < paths.size(); ++p) {
                const std::complex<double> c =
                    paths[p].gain * std::polar(1.0, -kTwoPi * f * paths[p].delay_s + kTwoPi * paths[p].doppler_hz * t);
                const auto& ar = arx[p];
                const auto& at = atx[p];
                for (std::size_t r = 0; r < nrx; ++r) {
                    const std::complex<double> cr = c * ar[r];
                    for (std::size_t cidx = 0; cidx < ntx; ++cidx) acc[r * ntx + cidx] += cr * std::conj(at[cidx]);
                }
            }
            double* cell = px + ((l * K + k) * ns) * 2;
            for (std::size_t s = 0; s < ns; ++s) {
                cell[2 * s] = acc[s].real();
                cell[2 * s + 1] = acc[s].imag();
            }
        }
    }
    return out;
}

enum class Mobility { Static, Pedestrian, Vehicular, HighSpeed };

inline double mobility_speed_mps(Mobility m) {
    switch (m) {
        case Mobility::Static: return 0.0;
        case Mobility::Pedestrian: return 1.5;
        case Mobility::Vehicular: return 30.0;
        case Mobility::HighSpeed: return 83.3;
    }
    throw std::invalid_argument("unknown mobility class");
}

inline Mobility mobility_from_string(const std::string& s) {
    if (s == "static") return Mobility::Static;
    if (s == "pedestrian") return Mobility::Pedestrian;
    if (s == "vehicular") return Mobility::Vehicular;
    if (s == "highspeed") return Mobility::HighSpeed;
    throw std::invalid_argument("unknown mobility class: " + s + " (expected static|pedestrian|vehicular|highspeed)");
}

inline std::string mobility_to_string(Mobility m) {
    switch (m) {
        case Mobility::Static: return "static";
        case Mobility::Pedestrian: return "pedestrian";
        case Mobility::Vehicular: return "vehicular";
        case Mobility::HighSpeed: return "highspeed";
    }
    return "?";
}

struct SceneConfig {
    double delay_spread_s = 200e-9;
    double carrier_hz = 2.0e9;
    double elevation_max = kPi / 4;  // draw elevations in [-max, max]
};

/// Draw a random multipath scene. Deterministic under the seed: path powers
/// decay exponentially with delay, delays are uniform over the configured
/// spread, and Doppler shifts are bounded by the mobility class's speed.
/// Gains are normalized so the total path power is 1.
inline std::vector<PathParams> random_scene(std::uint64_t seed, std::size_t n_paths, Mobility mobility,
                                            const SceneConfig& cfg = {}) {
    if (n_paths == 0) throw std::invalid_argument("random_scene: need at least one path");
    if (cfg.delay_spread_s < 0.0) throw std::invalid_argument("random_scene: negative delay spread");
    Rng rng(Rng::mix(seed, 0x5ce9e5));

    std::vector<double> delays(n_paths, 0.0);
    for (auto& d : delays) d = rng.uniform(0.0, cfg.delay_spread_s);
    std::sort(delays.begin(), delays.end());
    delays[0] = 0.0;  // leading path at zero excess delay

    const double tau_c = cfg.delay_spread_s > 0.0 ? cfg.delay_spread_s / 3.0 : 1.0;
    std::vector<double> powers(n_paths);
    double total = 0.0;
    for (std::size_t p = 0; p < n_paths; ++p) {
        powers[p] = std::exp(-delays[p] / tau_c);
        total += powers[p];
    }

    const double nu_max = mobility_speed_mps(mobility) * cfg.carrier_hz / kSpeedOfLight;
    std::vector<PathParams> out(n_paths);
    for (std::size_t p = 0; p < n_paths; ++p) {
        PathParams& pp = out[p];
        pp.delay_s = delays[p];
        pp.gain = std::polar(std::sqrt(powers[p] / total), rng.uniform(-kPi, kPi));
        pp.theta_tx = rng.uniform(-kPi, kPi);
        pp.phi_tx = rng.uniform(-cfg.elevation_max, cfg.elevation_max);
        pp.theta_rx = rng.uniform(-kPi, kPi);
        pp.phi_rx = rng.uniform(-cfg.elevation_max, cfg.elevation_max);
        pp.doppler_hz = nu_max * std::cos(rng.uniform(-kPi, kPi));
    }
    return out;
}

/// Squared Frobenius norm of the encoded complex channel.
inline double frobenius_sq(const CsiTensor& t) {
    double acc = 0.0;
    for (double v : t.x.data()) acc += v * v;
    return acc;
}

/// Scale the sample so the mean per-element power |H|^2 is 1.
/// Returns the multiplicative factor that was applied.
inline double normalize_power(CsiTensor& t) {
    const std::size_t cells = t.x.numel() / 2;
    const double mean_power = frobenius_sq(t) / static_cast<double>(cells);
    if (mean_power <= 0.0) return 1.0;
    const double scale = 1.0 / std::sqrt(mean_power);
    for (double& v : t.x.data()) v *= scale;
    return scale;
}

}  // namespace csimae
