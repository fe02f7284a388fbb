#pragma once

// Range-time preprocessing and the shared 1-D filtering primitives:
// adaptive clutter suppression, respiration-to-noise ratio profiling,
// range gating, zero-phase band-pass, anti-aliased resampling and global
// normalization.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <vector>

#include "somnoradar/common.hpp"
#include "somnoradar/fft.hpp"
#include "somnoradar/radar_cube.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::dsp {

// ---------------------------------------------------------------------------
// Clutter removal
// ---------------------------------------------------------------------------

/// Subtracts a per-bin exponential moving average c[t] = forget*c[t-1] +
/// (1-forget)*r[t]. The estimate is seeded with the first frame, so a purely
/// static scene cancels from frame 0.
inline RadarCube remove_clutter(const RadarCube& cube, double forget = 0.97) {
    if (!(forget > 0.0 && forget < 1.0))
        throw ParameterError("remove_clutter: forget must lie in (0,1)");
    cube.validate();
    RadarCube out = cube;
    std::vector<std::complex<double>> est(cube.bins);
    for (std::size_t b = 0; b < cube.bins; ++b) est[b] = cube.at(0, b);
    for (std::size_t t = 0; t < cube.frames; ++t) {
        for (std::size_t b = 0; b < cube.bins; ++b) {
            est[b] = forget * est[b] + (1.0 - forget) * cube.at(t, b);
            out.at(t, b) = cube.at(t, b) - est[b];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Respiration-to-noise ratio
// ---------------------------------------------------------------------------

inline constexpr double kRespBandLowHz = 0.1;   // 6 breaths/min
inline constexpr double kRespBandHighHz = 0.6;  // 36 breaths/min

namespace detail {

/// Accumulates in-band and out-of-band power of one complex slow-time block.
/// Frequencies are folded onto |f|; DC counts as out-of-band.
inline void band_power(const std::vector<std::complex<double>>& block, double fs, double lo,
                       double hi, double* in_band, double* out_band) {
    const std::size_t n = block.size();
    auto w = fft::hann_window(n);
    std::vector<std::complex<double>> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = block[i] * w[i];
    fft::transform(x, false);
    for (std::size_t k = 0; k < n; ++k) {
        double f = static_cast<double>(k) / static_cast<double>(n) * fs;
        if (f > fs / 2.0) f -= fs;
        double p = std::norm(x[k]);
        if (std::abs(f) >= lo && std::abs(f) <= hi)
            *in_band += p;
        else
            *out_band += p;
    }
}

}  // namespace detail

/// Per-bin ratio of slow-time power in [0.1, 0.6] Hz to the power everywhere
/// else. Records longer than 5 minutes are split into 5-minute blocks whose
/// periodograms are averaged. Call on clutter-removed data.
inline std::vector<double> rnr_profile(const RadarCube& cube) {
    cube.validate();
    if (cube.duration_seconds() < 60.0)
        throw InsufficientDataError("rnr_profile: need at least 60 s of slow time");
    const std::size_t block_frames =
        std::min(cube.frames, static_cast<std::size_t>(std::llround(300.0 * cube.frame_rate)));
    const std::size_t n_blocks = std::max<std::size_t>(1, cube.frames / block_frames);

    std::vector<double> profile(cube.bins, 0.0);
    std::vector<std::complex<double>> block(block_frames);
    for (std::size_t b = 0; b < cube.bins; ++b) {
        double in_band = 0.0, out_band = 0.0;
        for (std::size_t blk = 0; blk < n_blocks; ++blk) {
            for (std::size_t t = 0; t < block_frames; ++t)
                block[t] = cube.at(blk * block_frames + t, b);
            detail::band_power(block, cube.frame_rate, kRespBandLowHz, kRespBandHighHz, &in_band,
                               &out_band);
        }
        profile[b] = (out_band > 0.0) ? in_band / out_band : 0.0;
    }
    return profile;
}

// ---------------------------------------------------------------------------
// Range window selection
// ---------------------------------------------------------------------------

struct RangeWindow {
    std::size_t center_bin = 0;
    std::size_t half_width_bins = 0;
    std::size_t lo_bin = 0;  // inclusive
    std::size_t hi_bin = 0;  // inclusive
    bool clipped = false;
    std::vector<double> rnr_profile;

    std::size_t width() const { return hi_bin - lo_bin + 1; }
};

/// center = argmax of the profile (ties toward the smallest bin); the window
/// [center-half, center+half] is clipped to the profile bounds.
inline RangeWindow select_range_window(const std::vector<double>& profile,
                                       std::size_t half_width_bins) {
    if (profile.empty()) throw ParameterError("select_range_window: empty profile");
    auto it = std::max_element(profile.begin(), profile.end());
    if (*it <= 0.0) throw NoSubjectError("select_range_window: flat profile, no subject detected");
    RangeWindow win;
    win.center_bin = static_cast<std::size_t>(std::distance(profile.begin(), it));
    win.half_width_bins = half_width_bins;
    win.rnr_profile = profile;
    if (win.center_bin < half_width_bins) {
        win.lo_bin = 0;
        win.clipped = true;
    } else {
        win.lo_bin = win.center_bin - half_width_bins;
    }
    std::size_t hi = win.center_bin + half_width_bins;
    if (hi >= profile.size()) {
        win.hi_bin = profile.size() - 1;
        win.clipped = true;
    } else {
        win.hi_bin = hi;
    }
    return win;
}

// ---------------------------------------------------------------------------
// Zero-phase Butterworth band-pass
// ---------------------------------------------------------------------------

namespace detail {

struct Biquad {
    double b0, b1, b2, a1, a2;  // a0 normalized to 1
};

/// Butterworth band-pass as a cascade of biquads (analog prototype of order
/// `order`, band transform, bilinear mapping). Gain is normalized at the
/// geometric band center.
inline std::vector<Biquad> butter_bandpass(int order, double lo, double hi, double fs) {
    using cd = std::complex<double>;
    const double k = 2.0 * fs;  // bilinear constant
    const double w1 = k * std::tan(M_PI * lo / fs);
    const double w2 = k * std::tan(M_PI * hi / fs);
    const double bw = w2 - w1;
    const double w0sq = w1 * w2;

    std::vector<cd> poles;  // analog band-pass poles
    for (int i = 0; i < order; ++i) {
        double theta = M_PI * (2.0 * i + 1.0) / (2.0 * order) + M_PI / 2.0;
        cd p_lp(std::cos(theta), std::sin(theta));  // unit lowpass prototype
        cd a = 0.5 * bw * p_lp;
        cd d = std::sqrt(a * a - cd(w0sq, 0.0));
        poles.push_back(a + d);
        poles.push_back(a - d);
    }
    // bilinear transform; zeros land at z=+1 (order) and z=-1 (order)
    std::vector<cd> zpoles(poles.size());
    for (std::size_t i = 0; i < poles.size(); ++i) zpoles[i] = (k + poles[i]) / (k - poles[i]);

    // pair into biquads: sort by |imag| so conjugates sit together
    std::sort(zpoles.begin(), zpoles.end(), [](const cd& a, const cd& b) {
        if (std::abs(a.imag()) != std::abs(b.imag())) return std::abs(a.imag()) < std::abs(b.imag());
        return a.real() < b.real();
    });
    std::vector<Biquad> stages;
    for (int i = 0; i < order; ++i) {
        cd p1 = zpoles[2 * i], p2 = zpoles[2 * i + 1];
        double a1 = -(p1 + p2).real();
        double a2 = (p1 * p2).real();
        // numerator (z-1)(z+1) = z^2 - 1 per stage
        stages.push_back({1.0, 0.0, -1.0, a1, a2});
    }
    // normalize gain at the geometric center of the digital band
    double fc = std::sqrt(lo * hi);
    cd z = std::polar(1.0, 2.0 * M_PI * fc / fs);
    cd g(1.0, 0.0);
    for (const auto& s : stages)
        g *= (s.b0 * z * z + s.b1 * z + s.b2) / (z * z + s.a1 * z + s.a2);
    double scale = std::pow(1.0 / std::abs(g), 1.0 / static_cast<double>(order));
    for (auto& s : stages) {
        s.b0 *= scale;
        s.b1 *= scale;
        s.b2 *= scale;
    }
    return stages;
}

inline void biquad_run(const Biquad& q, std::vector<double>& x) {
    double s1 = 0.0, s2 = 0.0;  // direct form II transposed state
    for (double& v : x) {
        double y = q.b0 * v + s1;
        s1 = q.b1 * v - q.a1 * y + s2;
        s2 = q.b2 * v - q.a2 * y;
        v = y;
    }
}

/// Forward-backward filtering with odd-reflection edge padding.
inline std::vector<double> filtfilt(const std::vector<Biquad>& stages, const std::vector<double>& x,
                                    std::size_t pad) {
    const std::size_t n = x.size();
    pad = std::min(pad, n - 1);
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x.front() - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x.back() - x[n - 1 - i]);

    for (const auto& q : stages) biquad_run(q, ext);
    std::reverse(ext.begin(), ext.end());
    for (const auto& q : stages) biquad_run(q, ext);
    std::reverse(ext.begin(), ext.end());
    return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(pad),
                               ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

}  // namespace detail

inline constexpr int kBandPassOrder = 4;

/// Zero-phase Butterworth band-pass. Output length equals input length.
inline Waveform band_pass(const Waveform& w, double lo, double hi) {
    w.validate();
    if (!(lo > 0.0 && lo < hi && hi < w.rate / 2.0))
        throw ParameterError("band_pass: need 0 < lo < hi < rate/2");
    if (w.values.size() < 4) throw InsufficientDataError("band_pass: signal too short");
    auto stages = detail::butter_bandpass(kBandPassOrder, lo, hi, w.rate);
    // pad with ~3 cycles of the lowest cutoff so startup transients die out
    auto pad = static_cast<std::size_t>(std::llround(3.0 * w.rate / lo));
    Waveform out = w;
    out.values = detail::filtfilt(stages, w.values, pad);
    return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Anti-aliased resampling to a lower (or equal) rate via a normalized
/// windowed-sinc kernel evaluated directly in input-sample coordinates;
/// handles non-integer ratios. Equal rates return the input unchanged.
inline Waveform resample(const Waveform& w, double target_rate) {
    w.validate();
    if (!(target_rate > 0.0)) throw ParameterError("resample: target rate must be > 0");
    if (target_rate > w.rate + 1e-12)
        throw ParameterError("resample: upsampling is unsupported (target exceeds source rate)");
    if (std::abs(target_rate - w.rate) < 1e-12) return w;

    const double ratio = target_rate / w.rate;  // < 1, also the kernel cutoff
    const std::size_t n = w.values.size();
    const auto out_len = static_cast<std::size_t>(
        std::ceil(static_cast<double>(n) * ratio - 1e-9));
    const double half_width = 10.0 / ratio;  // input samples per side
    const auto reach = static_cast<std::ptrdiff_t>(std::ceil(half_width));

    auto mirrored = [&](std::ptrdiff_t idx) {
        // even reflection at both ends
        const auto last = static_cast<std::ptrdiff_t>(n) - 1;
        while (idx < 0 || idx > last) {
            if (idx < 0) idx = -idx;
            if (idx > last) idx = 2 * last - idx;
        }
        return w.values[static_cast<std::size_t>(idx)];
    };

    Waveform out;
    out.rate = target_rate;
    out.channel = w.channel;
    out.origin = w.origin;
    out.values.resize(out_len);
    for (std::size_t k = 0; k < out_len; ++k) {
        const double u = static_cast<double>(k) / ratio;  // position in input samples
        const auto j0 = static_cast<std::ptrdiff_t>(std::floor(u)) - reach;
        const auto j1 = static_cast<std::ptrdiff_t>(std::floor(u)) + reach + 1;
        double acc = 0.0, wsum = 0.0;
        for (std::ptrdiff_t j = j0; j <= j1; ++j) {
            const double t = u - static_cast<double>(j);
            if (std::abs(t) > half_width) continue;
            const double st = ratio * t;
            const double sinc = (std::abs(st) < 1e-12) ? 1.0 : std::sin(M_PI * st) / (M_PI * st);
            const double win = 0.5 + 0.5 * std::cos(M_PI * t / half_width);  // Hann taper
            const double wt = sinc * win;
            acc += mirrored(j) * wt;
            wsum += wt;
        }
        out.values[k] = (wsum != 0.0) ? acc / wsum : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Whole-record z-score (population standard deviation).
inline Waveform zscore_normalize(const Waveform& w) {
    w.validate();
    if (w.values.size() < 2) throw InsufficientDataError("zscore_normalize: need >= 2 samples");
    const double m = mean_of(w.values);
    double acc = 0.0;
    for (double x : w.values) acc += (x - m) * (x - m);
    const double sd = std::sqrt(acc / static_cast<double>(w.values.size()));
    if (sd <= 0.0) throw NormalizationError("zscore_normalize: constant signal has zero variance");
    Waveform out = w;
    for (double& x : out.values) x = (x - m) / sd;
    return out;
}

}  // namespace somnoradar::dsp
