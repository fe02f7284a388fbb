#pragma once

// Multivariate empirical mode decomposition: joint sifting of a K-channel
// signal into intrinsic mode functions sharing instantaneous frequency.
// Projection directions are a deterministic quasi-uniform set on the
// (K-1)-sphere; envelopes come from cubic splines through projected maxima.

#include <cmath>
#include <cstddef>
#include <vector>

#include "somnoradar/common.hpp"
#include "somnoradar/spline.hpp"

namespace somnoradar::memd {

using MultiSeries = std::vector<std::vector<double>>;  // [channel][t]

struct ImfSet {
    std::vector<MultiSeries> imfs;  // [mode][channel][t]
    MultiSeries residual;           // [channel][t]
    double rate = 0.0;
    bool converged = true;  // false when any mode hit the sift-iteration cap

    std::size_t num_imfs() const { return imfs.size(); }
    std::size_t num_channels() const { return residual.size(); }
};

inline constexpr int kMaxSiftIterations = 50;
inline constexpr double kSiftStopSd = 0.2;
inline constexpr int kDefaultMaxImfs = 10;
inline constexpr int kDefaultDirections = 64;

namespace detail {

inline const double kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41,
                                 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};

/// Quasi-uniform unit vectors on the (K-1)-sphere from a rank-1 Kronecker
/// lattice pushed through the normal quantile map. K = 1 degenerates to
/// {+1, -1} which recovers classic univariate sifting.
inline MultiSeries direction_set(std::size_t channels, int count) {
    MultiSeries dirs;
    if (channels == 1) {
        dirs.push_back({1.0});
        dirs.push_back({-1.0});
        return dirs;
    }
    if (count < 2) throw ParameterError("memd: need at least 2 directions");
    for (int i = 0; i < count; ++i) {
        std::vector<double> v(channels);
        double norm = 0.0;
        for (std::size_t j = 0; j < channels; ++j) {
            double alpha = std::sqrt(kPrimes[j % (sizeof(kPrimes) / sizeof(double))]);
            double u = std::fmod((static_cast<double>(i) + 0.5) * alpha, 1.0);
            u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
            v[j] = inverse_normal_cdf(u);
            norm += v[j] * v[j];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) continue;
        for (auto& x : v) x /= norm;
        dirs.push_back(std::move(v));
    }
    return dirs;
}

/// Indices of local maxima; plateaus contribute their midpoint.
inline std::vector<std::size_t> local_maxima(const std::vector<double>& p) {
    std::vector<std::size_t> out;
    const std::size_t n = p.size();
    std::size_t i = 1;
    while (i + 1 < n) {
        if (p[i] > p[i - 1]) {
            std::size_t j = i;
            while (j + 1 < n && p[j + 1] == p[i]) ++j;
            if (j + 1 < n && p[j + 1] < p[i]) out.push_back((i + j) / 2);
            i = j + 1;
        } else {
            ++i;
        }
    }
    return out;
}

/// Mean envelope across all usable projection directions; returns false when
/// no direction yields enough extrema to interpolate.
inline bool mean_envelope(const MultiSeries& h, const MultiSeries& dirs, MultiSeries* env) {
    const std::size_t channels = h.size();
    const std::size_t n = h[0].size();
    for (auto& e : *env) std::fill(e.begin(), e.end(), 0.0);
    std::size_t usable = 0;
    std::vector<double> proj(n);
    for (const auto& dir : dirs) {
        for (std::size_t t = 0; t < n; ++t) {
            double acc = 0.0;
            for (std::size_t k = 0; k < channels; ++k) acc += dir[k] * h[k][t];
            proj[t] = acc;
        }
        auto maxima = local_maxima(proj);
        if (maxima.size() < 2) continue;
        // boundary handling: mirror up to two extrema across each edge so the
        // spline does not droop toward the record ends
        std::vector<double> knots_x;
        const std::size_t mirror = std::min<std::size_t>(2, maxima.size());
        const double last = static_cast<double>(n - 1);
        for (std::size_t q = mirror; q-- > 0;) {
            double pos = -static_cast<double>(maxima[q]);
            if (pos < 0.0) knots_x.push_back(pos);
        }
        for (auto m : maxima) knots_x.push_back(static_cast<double>(m));
        for (std::size_t q = maxima.size(); q-- > maxima.size() - mirror;) {
            double pos = 2.0 * last - static_cast<double>(maxima[q]);
            if (pos > last) knots_x.push_back(pos);
        }
        std::vector<double> knots_y(knots_x.size());
        for (std::size_t k = 0; k < channels; ++k) {
            for (std::size_t q = 0; q < knots_x.size(); ++q) {
                double pos = knots_x[q];
                if (pos < 0.0) pos = -pos;
                if (pos > last) pos = 2.0 * last - pos;
                knots_y[q] = h[k][static_cast<std::size_t>(pos)];
            }
            CubicSpline sp(knots_x, knots_y);
            auto curve = sp.sample(n);
            for (std::size_t t = 0; t < n; ++t) (*env)[k][t] += curve[t];
        }
        ++usable;
    }
    if (usable == 0) return false;
    for (auto& e : *env)
        for (auto& x : e) x /= static_cast<double>(usable);
    return true;
}

}  // namespace detail

/// Decomposes a K-channel signal into multivariate IMFs plus residual.
/// Sifting stops when the energy of the update drops below kSiftStopSd of
/// the current mode, or after kMaxSiftIterations (flagged via `converged`).
/// Reconstruction (sum of IMFs + residual) is exact by construction.
inline ImfSet decompose(const MultiSeries& channels, double rate,
                        int max_imfs = kDefaultMaxImfs, int directions = kDefaultDirections) {
    if (channels.empty()) throw ParameterError("memd: need at least one channel");
    const std::size_t n = channels[0].size();
    if (n < 100) throw InsufficientDataError("memd: need at least 100 samples");
    for (const auto& c : channels)
        if (c.size() != n) throw ShapeError("memd: channels must have equal length");

    auto dirs = detail::direction_set(channels.size(), directions);
    ImfSet out;
    out.rate = rate;

    MultiSeries residual = channels;
    MultiSeries env(channels.size(), std::vector<double>(n, 0.0));
    for (int m = 0; m < max_imfs; ++m) {
        MultiSeries mode = residual;
        bool stopped = false;
        for (int it = 0; it < kMaxSiftIterations; ++it) {
            if (!detail::mean_envelope(mode, dirs, &env)) {
                // nothing to extract from this candidate; treat as residual
                if (it == 0) {
                    out.residual = std::move(residual);
                    return out;
                }
                stopped = true;
                break;
            }
            double num = 0.0, den = 0.0;
            for (std::size_t k = 0; k < mode.size(); ++k) {
                for (std::size_t t = 0; t < n; ++t) {
                    num += env[k][t] * env[k][t];
                    den += mode[k][t] * mode[k][t];
                    mode[k][t] -= env[k][t];
                }
            }
            if (den <= 0.0 || num / den < kSiftStopSd) {
                stopped = true;
                break;
            }
        }
        if (!stopped) out.converged = false;
        for (std::size_t k = 0; k < mode.size(); ++k)
            for (std::size_t t = 0; t < n; ++t) residual[k][t] -= mode[k][t];
        out.imfs.push_back(std::move(mode));
    }
    out.residual = std::move(residual);
    return out;
}

/// Relative reconstruction error || sum(IMFs) + residual - input || / || input ||.
inline double reconstruction_error(const ImfSet& set, const MultiSeries& input) {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < input.size(); ++k) {
        for (std::size_t t = 0; t < input[k].size(); ++t) {
            double s = set.residual[k][t];
            for (const auto& imf : set.imfs) s += imf[k][t];
            num += (s - input[k][t]) * (s - input[k][t]);
            den += input[k][t] * input[k][t];
        }
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace somnoradar::memd
