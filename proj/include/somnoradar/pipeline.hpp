#pragma once

// Per-night preprocessing chains: raw radar cube or PSG channels in,
// normalized 10 Hz respiration + activity out.

#include <algorithm>
#include <vector>

#include "somnoradar/channels.hpp"
#include "somnoradar/common.hpp"
#include "somnoradar/dsp.hpp"
#include "somnoradar/memd.hpp"
#include "somnoradar/radar_cube.hpp"
#include "somnoradar/synth.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::pipeline {

struct RadarChainOptions {
    double clutter_forget = 0.97;
    double window_half_width_m = 0.5;  // tau_max as range
    double motion_window_s = 1.0;
    double motion_lambda = 6.0;
    int memd_max_imfs = 10;
    int memd_directions = 64;
    double memd_rate = 10.0;  // phases are decimated to this before sifting
};

struct NightChannels {
    Waveform respiration;  // 10 Hz, z-scored
    Waveform activity;     // 10 Hz, z-scored
    bool low_quality = false;
    std::size_t epochs = 0;
};

namespace detail {

/// Drops bundle channels whose typical magnitude sits near the noise floor:
/// the phase of a noise-dominated bin is a random walk that would leak into
/// the channel-averaged respiration. The floor is estimated from the
/// clutter-removed bins outside the observation window.
inline channels::PhaseBundle gate_bundle_by_magnitude(const RadarCube& clean,
                                                      const dsp::RangeWindow& window,
                                                      const channels::PhaseBundle& bundle) {
    auto median_magnitude = [&](std::size_t bin) {
        std::vector<double> mags(clean.frames);
        for (std::size_t t = 0; t < clean.frames; ++t) mags[t] = std::abs(clean.at(t, bin));
        return median_of(std::move(mags));
    };
    std::vector<double> outside;
    for (std::size_t b = 0; b < clean.bins; ++b)
        if (b < window.lo_bin || b > window.hi_bin) outside.push_back(median_magnitude(b));
    if (outside.empty()) return bundle;
    const double floor = median_of(std::move(outside));

    std::vector<double> mags(bundle.num_channels());
    for (std::size_t c = 0; c < bundle.num_channels(); ++c)
        mags[c] = median_magnitude(bundle.bin_indices[c]);

    channels::PhaseBundle gated;
    gated.rate = bundle.rate;
    for (std::size_t c = 0; c < bundle.num_channels(); ++c) {
        if (mags[c] >= 1.5 * floor) {
            gated.phases.push_back(bundle.phases[c]);
            gated.bin_indices.push_back(bundle.bin_indices[c]);
        }
    }
    if (gated.phases.size() >= 3) return gated;
    // degenerate scene: fall back to the three strongest bins
    std::vector<std::size_t> order(bundle.num_channels());
    for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return mags[a] > mags[b]; });
    gated.phases.clear();
    gated.bin_indices.clear();
    for (std::size_t i = 0; i < std::min<std::size_t>(3, order.size()); ++i) {
        gated.phases.push_back(bundle.phases[order[i]]);
        gated.bin_indices.push_back(bundle.bin_indices[order[i]]);
    }
    return gated;
}

/// Removes the sub-band drift of each unwrapped phase channel (unwrap slips
/// around motion bursts leave large step plateaus that would otherwise
/// dominate the sifting envelopes). A centered moving-average subtraction
/// with a 12 s window keeps everything at and above the 0.1 Hz band edge.
inline void detrend_bundle(channels::PhaseBundle* bundle, double window_seconds = 12.0) {
    const auto w = static_cast<std::size_t>(window_seconds * bundle->rate);
    if (w < 2) return;
    for (auto& series : bundle->phases) {
        const std::size_t n = series.size();
        std::vector<double> ps(n + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) ps[i + 1] = ps[i] + series[i];
        std::vector<double> out(n);
        const std::size_t half = w / 2;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t lo = (i >= half) ? i - half : 0;
            std::size_t hi = std::min(n, i + half + 1);
            double local = (ps[hi] - ps[lo]) / static_cast<double>(hi - lo);
            out[i] = series[i] - local;
        }
        series = std::move(out);
    }
}

inline void align_and_finalize(NightChannels* out) {
    std::size_t n = std::min(out->respiration.values.size(), out->activity.values.size());
    out->respiration.values.resize(n);
    out->activity.values.resize(n);
    out->respiration = dsp::zscore_normalize(out->respiration);
    out->activity = dsp::zscore_normalize(out->activity);
    out->epochs = n / static_cast<std::size_t>(30.0 * channels::kChannelRateHz);
}

}  // namespace detail

/// Full radar chain: clutter removal, RNR range gating, motion/energy
/// activity, phase unwrap, MEMD respiration reconstruction, normalization.
inline NightChannels process_radar_night(const RadarCube& cube,
                                         const RadarChainOptions& opts = {}) {
    auto clean = dsp::remove_clutter(cube, opts.clutter_forget);
    auto profile = dsp::rnr_profile(clean);
    auto half_bins = static_cast<std::size_t>(
        std::llround(opts.window_half_width_m / cube.range_bin_size));
    auto window = dsp::select_range_window(profile, half_bins);

    auto energy = channels::radar_energy(clean, window);
    auto motion = channels::motion_mask(energy, opts.motion_window_s, opts.motion_lambda);

    auto bundle = channels::phase_trajectories(clean, window);
    bundle = detail::gate_bundle_by_magnitude(clean, window, bundle);
    if (bundle.rate > opts.memd_rate)
        bundle = channels::decimate_bundle(bundle, opts.memd_rate);
    detail::detrend_bundle(&bundle);
    // suppress wideband phase noise above the breathing range before
    // sifting; the band keeps a full octave of margin around 0.1-0.6 Hz
    for (auto& series : bundle.phases) {
        Waveform w(series, bundle.rate, Channel::Phase, Origin::Radar);
        series = dsp::band_pass(w, 0.08, 1.2).values;
    }
    auto imfs = memd::decompose(bundle.phases, bundle.rate, opts.memd_max_imfs,
                                opts.memd_directions);

    std::vector<double> weights;
    for (auto b : bundle.bin_indices) weights.push_back(profile[b]);
    auto choice = channels::select_respiratory_imf(imfs, weights);

    NightChannels out;
    out.respiration = channels::reconstruct_respiration(imfs, choice.index);
    out.activity = motion.activity;
    out.low_quality = choice.low_quality || !imfs.converged;
    detail::align_and_finalize(&out);
    return out;
}

/// PSG chain: band-passed belt respiration and IMU-derived activity.
inline NightChannels process_psg_night(const Waveform& belt,
                                       const channels::TriaxialSeries& imu) {
    NightChannels out;
    auto filtered = dsp::band_pass(belt, dsp::kRespBandLowHz, dsp::kRespBandHighHz);
    out.respiration = dsp::resample(filtered, channels::kChannelRateHz);
    out.respiration.channel = Channel::Respiration;
    auto magnitude = channels::imu_magnitude(imu);
    out.activity = channels::activity_from_imu(magnitude);
    detail::align_and_finalize(&out);
    return out;
}

inline NightChannels process_psg_night(const synth::PsgNight& night) {
    return process_psg_night(night.belt, night.imu);
}

}  // namespace somnoradar::pipeline
