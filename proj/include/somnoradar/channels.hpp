#pragma once

// Derivation of the two model input channels (activity, respiration) from
// PSG-style sources (belt + wrist IMU) or radar cubes.

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include "somnoradar/common.hpp"
#include "somnoradar/dsp.hpp"
#include "somnoradar/memd.hpp"
#include "somnoradar/radar_cube.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::channels {

inline constexpr double kChannelRateHz = 10.0;
inline constexpr double kImuBandLowHz = 0.25;
inline constexpr double kImuBandHighHz = 2.5;

// ---------------------------------------------------------------------------
// IMU-derived activity
// ---------------------------------------------------------------------------

struct TriaxialSeries {
    std::vector<double> acc_x, acc_y, acc_z;  // in g
    double rate = 0.0;

    void validate() const {
        if (!(rate > 0.0)) throw ParameterError("triaxial series: rate must be > 0");
        if (acc_x.size() != acc_y.size() || acc_y.size() != acc_z.size())
            throw ShapeError("triaxial series: axes must have equal length");
    }
    std::size_t size() const { return acc_x.size(); }
};

/// Pointwise acceleration magnitude sqrt(x^2 + y^2 + z^2).
inline Waveform imu_magnitude(const TriaxialSeries& s) {
    s.validate();
    Waveform out;
    out.rate = s.rate;
    out.channel = Channel::Activity;
    out.origin = Origin::PsgImu;
    out.values.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        out.values[i] =
            std::sqrt(s.acc_x[i] * s.acc_x[i] + s.acc_y[i] * s.acc_y[i] + s.acc_z[i] * s.acc_z[i]);
    return out;
}

/// Band-passed [0.25, 2.5] Hz magnitude reduced by overlapped 1-s mean
/// absolute deviation windows advanced every 0.1 s, yielding a 10 Hz
/// activity waveform.
inline Waveform activity_from_imu(const Waveform& magnitude) {
    magnitude.validate();
    if (magnitude.rate < 5.0) throw ParameterError("activity_from_imu: rate must be >= 5 Hz");
    if (magnitude.duration_seconds() < 1.0)
        throw InsufficientDataError("activity_from_imu: record shorter than the 1-s window");
    const double hi = std::min(kImuBandHighHz, 0.49 * magnitude.rate);
    Waveform filtered = dsp::band_pass(magnitude, kImuBandLowHz, hi);

    const auto window = static_cast<std::size_t>(std::llround(magnitude.rate));
    const std::size_t n = filtered.values.size();
    Waveform out;
    out.rate = kChannelRateHz;
    out.channel = Channel::Activity;
    out.origin = magnitude.origin;
    for (std::size_t k = 0;; ++k) {
        const auto start =
            static_cast<std::size_t>(std::llround(static_cast<double>(k) * magnitude.rate / 10.0));
        if (start + window > n) break;
        double m = 0.0;
        for (std::size_t i = 0; i < window; ++i) m += filtered.values[start + i];
        m /= static_cast<double>(window);
        double mad = 0.0;
        for (std::size_t i = 0; i < window; ++i) mad += std::abs(filtered.values[start + i] - m);
        out.values.push_back(mad / static_cast<double>(window));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Radar energy + motion
// ---------------------------------------------------------------------------

/// Total received energy within the range window, one value per frame.
inline Waveform radar_energy(const RadarCube& cube, const dsp::RangeWindow& win) {
    cube.validate();
    if (win.hi_bin >= cube.bins || win.lo_bin > win.hi_bin)
        throw BoundsError("radar_energy: window outside cube bounds");
    Waveform out;
    out.rate = cube.frame_rate;
    out.channel = Channel::Energy;
    out.origin = Origin::Radar;
    out.values.resize(cube.frames);
    for (std::size_t t = 0; t < cube.frames; ++t) {
        double acc = 0.0;
        for (std::size_t b = win.lo_bin; b <= win.hi_bin; ++b) acc += std::norm(cube.at(t, b));
        out.values[t] = acc;
    }
    return out;
}

struct MotionResult {
    std::vector<bool> mask;   // per frame: variance above robust threshold
    Waveform variance;        // sliding-window variance at frame rate
    Waveform activity;        // log(1 + Var/MAD) resampled to 10 Hz
    double threshold = 0.0;   // median(V) + lambda * MAD(V)
    double mad = 0.0;
};

/// Sliding-window variance of the energy series with a robust
/// median + lambda*MAD threshold. Windows are centered and clamped at the
/// record edges.
inline MotionResult motion_mask(const Waveform& energy, double window_seconds = 1.0,
                                double lambda = 6.0) {
    energy.validate();
    const std::size_t n = energy.values.size();
    auto w = static_cast<std::size_t>(std::llround(window_seconds * energy.rate));
    if (w < 2 || n < w)
        throw InsufficientDataError("motion_mask: record shorter than the variance window");

    // prefix sums for O(1) window moments
    std::vector<double> ps(n + 1, 0.0), ps2(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        ps[i + 1] = ps[i] + energy.values[i];
        ps2[i + 1] = ps2[i] + energy.values[i] * energy.values[i];
    }
    MotionResult res;
    res.variance.rate = energy.rate;
    res.variance.channel = Channel::Activity;
    res.variance.origin = Origin::Radar;
    res.variance.values.resize(n);
    const std::size_t half = w / 2;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lo = (i >= half) ? i - half : 0;
        std::size_t hi = std::min(n, lo + w);
        lo = (hi >= w) ? hi - w : 0;
        const double cnt = static_cast<double>(hi - lo);
        const double m = (ps[hi] - ps[lo]) / cnt;
        double v = (ps2[hi] - ps2[lo]) / cnt - m * m;
        res.variance.values[i] = std::max(0.0, v);
    }
    const double med = median_of(res.variance.values);
    res.mad = mad_of(res.variance.values);
    res.threshold = med + lambda * res.mad;
    res.mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) res.mask[i] = res.variance.values[i] > res.threshold;

    Waveform act = res.variance;
    if (res.mad > 0.0) {
        for (double& v : act.values) v = std::log1p(v / res.mad);
    } else {
        std::fill(act.values.begin(), act.values.end(), 0.0);
    }
    if (energy.rate < kChannelRateHz)
        throw ConfigError("motion_mask: frame rate below the 10 Hz channel rate");
    res.activity = dsp::resample(act, kChannelRateHz);
    return res;
}

// ---------------------------------------------------------------------------
// Phase trajectories
// ---------------------------------------------------------------------------

struct PhaseBundle {
    memd::MultiSeries phases;             // [channel][t], radians, unwrapped
    std::vector<std::size_t> bin_indices;  // fast-time bin of each channel
    double rate = 0.0;

    std::size_t num_channels() const { return phases.size(); }
};

namespace detail {

inline std::vector<double> unwrap(const std::vector<double>& phase) {
    std::vector<double> out(phase.size());
    if (phase.empty()) return out;
    out[0] = phase[0];
    for (std::size_t i = 1; i < phase.size(); ++i) {
        double d = phase[i] - phase[i - 1];
        d -= 2.0 * M_PI * std::round(d / (2.0 * M_PI));
        out[i] = out[i - 1] + d;
    }
    return out;
}

}  // namespace detail

inline constexpr double kPhaseMagnitudeFloor = 1e-12;

/// Four-quadrant phase per window bin, unwrapped along slow time. Bins whose
/// magnitude stays below 1e-12 for more than one second are dropped (their
/// phase is meaningless); an empty result raises NoSignalError.
inline PhaseBundle phase_trajectories(const RadarCube& cube, const dsp::RangeWindow& win) {
    cube.validate();
    if (win.hi_bin >= cube.bins || win.lo_bin > win.hi_bin)
        throw BoundsError("phase_trajectories: window outside cube bounds");
    const auto max_dead = static_cast<std::size_t>(std::llround(cube.frame_rate));
    PhaseBundle bundle;
    bundle.rate = cube.frame_rate;
    std::vector<double> raw(cube.frames);
    for (std::size_t b = win.lo_bin; b <= win.hi_bin; ++b) {
        std::size_t dead_run = 0, longest = 0;
        for (std::size_t t = 0; t < cube.frames; ++t) {
            if (std::abs(cube.at(t, b)) < kPhaseMagnitudeFloor) {
                ++dead_run;
                longest = std::max(longest, dead_run);
            } else {
                dead_run = 0;
            }
        }
        if (longest > max_dead) continue;
        for (std::size_t t = 0; t < cube.frames; ++t)
            raw[t] = std::arg(cube.at(t, b));
        bundle.phases.push_back(detail::unwrap(raw));
        bundle.bin_indices.push_back(b);
    }
    if (bundle.phases.empty())
        throw NoSignalError("phase_trajectories: no bin with usable magnitude");
    return bundle;
}

/// Anti-aliased decimation of every bundle channel to a common lower rate.
inline PhaseBundle decimate_bundle(const PhaseBundle& bundle, double target_rate) {
    PhaseBundle out;
    out.bin_indices = bundle.bin_indices;
    out.rate = target_rate;
    for (const auto& series : bundle.phases) {
        Waveform w(series, bundle.rate, Channel::Phase, Origin::Radar);
        out.phases.push_back(dsp::resample(w, target_rate).values);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Respiratory IMF selection and reconstruction
// ---------------------------------------------------------------------------

struct InstantFrequency {
    Waveform freq;            // Hz, same rate/length as the input
    std::vector<bool> valid;  // false where a window saw < 2 crossings
};

namespace detail {

/// Linearly interpolated zero-crossing times in seconds.
inline std::vector<double> crossing_times(const std::vector<double>& x, double rate) {
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < x.size(); ++i) {
        if (x[i] == 0.0) {
            if (i > 0 && x[i - 1] * x[i + 1] < 0.0) out.push_back(static_cast<double>(i) / rate);
        } else if (x[i] * x[i + 1] < 0.0) {
            double frac = x[i] / (x[i] - x[i + 1]);
            out.push_back((static_cast<double>(i) + frac) / rate);
        }
    }
    return out;
}

/// Mean oscillation frequency from crossing spacing; nullopt if < 2 crossings.
inline std::optional<double> mean_frequency(const std::vector<double>& x, double rate) {
    auto cs = crossing_times(x, rate);
    if (cs.size() < 2) return std::nullopt;
    double span = cs.back() - cs.front();
    if (span <= 0.0) return std::nullopt;
    return static_cast<double>(cs.size() - 1) / (2.0 * span);
}

/// Band-power ratio of a real series using the shared RNR band definition.
inline double series_rnr(const std::vector<double>& x, double rate) {
    std::vector<std::complex<double>> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = {x[i], 0.0};
    double in_band = 0.0, out_band = 0.0;
    dsp::detail::band_power(z, rate, dsp::kRespBandLowHz, dsp::kRespBandHighHz, &in_band, &out_band);
    return out_band > 0.0 ? in_band / out_band : 0.0;
}

inline double in_band_fraction(const std::vector<double>& x, double rate) {
    double rnr = series_rnr(x, rate);
    return rnr / (1.0 + rnr);
}

}  // namespace detail

/// Zero-crossing rate estimate over 10-s sliding windows (clamped at edges).
inline InstantFrequency instantaneous_frequency(const Waveform& w, double window_seconds = 10.0) {
    w.validate();
    const std::size_t n = w.values.size();
    auto cs = detail::crossing_times(w.values, w.rate);
    InstantFrequency out;
    out.freq.rate = w.rate;
    out.freq.channel = w.channel;
    out.freq.origin = w.origin;
    out.freq.values.assign(n, 0.0);
    out.valid.assign(n, false);
    const double half = window_seconds / 2.0;
    const double duration = static_cast<double>(n) / w.rate;
    for (std::size_t i = 0; i < n; ++i) {
        double t = static_cast<double>(i) / w.rate;
        double lo = std::max(0.0, t - half);
        double hi = std::min(duration, t + half);
        auto first = std::lower_bound(cs.begin(), cs.end(), lo);
        auto last = std::upper_bound(cs.begin(), cs.end(), hi);
        auto count = static_cast<std::size_t>(std::distance(first, last));
        if (count < 2) continue;
        double span = *(last - 1) - *first;
        if (span <= 0.0) continue;
        out.freq.values[i] = static_cast<double>(count - 1) / (2.0 * span);
        out.valid[i] = true;
    }
    return out;
}

struct ImfChoice {
    std::size_t index = 0;
    bool low_quality = false;  // set when no IMF sat in the breathing band
};

/// Among IMFs whose mean zero-crossing frequency lies in the 6-36 bpm band,
/// picks the one maximizing channel-averaged RNR. Channels can be weighted
/// by the per-bin RNR profile of the originating range window (empty or
/// mismatched weights fall back to uniform). If no IMF is in band, returns
/// the one with the highest in-band spectral fraction and flags low quality.
inline ImfChoice select_respiratory_imf(const memd::ImfSet& set,
                                        const std::vector<double>& bin_weights = {}) {
    if (set.imfs.empty()) throw ParameterError("select_respiratory_imf: empty IMF set");
    const std::size_t channels = set.imfs[0].size();
    std::vector<double> wts(channels, 1.0);
    if (bin_weights.size() == channels) {
        double sum = 0.0;
        for (double v : bin_weights) sum += std::max(0.0, v);
        if (sum > 0.0)
            for (std::size_t k = 0; k < channels; ++k) wts[k] = std::max(0.0, bin_weights[k]);
    }
    double wsum = 0.0;
    for (double v : wts) wsum += v;

    ImfChoice choice;
    double best_rnr = -1.0, best_fraction = -1.0;
    std::size_t best_frac_idx = 0;
    for (std::size_t m = 0; m < set.imfs.size(); ++m) {
        double freq_acc = 0.0, rnr_acc = 0.0, frac_acc = 0.0;
        std::size_t freq_count = 0;
        for (std::size_t k = 0; k < channels; ++k) {
            if (auto f = detail::mean_frequency(set.imfs[m][k], set.rate)) {
                freq_acc += *f;
                ++freq_count;
            }
            rnr_acc += wts[k] * detail::series_rnr(set.imfs[m][k], set.rate);
            frac_acc += wts[k] * detail::in_band_fraction(set.imfs[m][k], set.rate);
        }
        rnr_acc /= wsum;
        frac_acc /= wsum;
        if (frac_acc > best_fraction) {
            best_fraction = frac_acc;
            best_frac_idx = m;
        }
        if (freq_count == 0) continue;
        double mean_freq = freq_acc / static_cast<double>(freq_count);
        if (mean_freq >= dsp::kRespBandLowHz && mean_freq <= dsp::kRespBandHighHz &&
            rnr_acc > best_rnr) {
            best_rnr = rnr_acc;
            choice.index = m;
        }
    }
    if (best_rnr < 0.0) {
        choice.index = best_frac_idx;
        choice.low_quality = true;
    }
    return choice;
}

/// Channel average of the selected IMF, band-passed to 0.1-0.6 Hz and
/// resampled to the common 10 Hz channel rate.
inline Waveform reconstruct_respiration(const memd::ImfSet& set, std::size_t index) {
    if (index >= set.imfs.size()) throw BoundsError("reconstruct_respiration: bad IMF index");
    const auto& imf = set.imfs[index];
    const std::size_t channels = imf.size();
    const std::size_t n = imf[0].size();
    Waveform mean;
    mean.rate = set.rate;
    mean.channel = Channel::Respiration;
    mean.origin = Origin::Radar;
    mean.values.assign(n, 0.0);
    for (std::size_t k = 0; k < channels; ++k)
        for (std::size_t t = 0; t < n; ++t) mean.values[t] += imf[k][t];
    for (double& v : mean.values) v /= static_cast<double>(channels);
    Waveform filtered = dsp::band_pass(mean, dsp::kRespBandLowHz, dsp::kRespBandHighHz);
    if (filtered.rate > kChannelRateHz) return dsp::resample(filtered, kChannelRateHz);
    return filtered;
}

}  // namespace somnoradar::channels
