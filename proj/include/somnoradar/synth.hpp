#pragma once

// Forward model for paired source-domain (belt + wrist IMU) and
// target-domain (radar cube) nights with known hypnograms. Stage-conditional
// respiration and movement statistics are plausibility-scale defaults, not
// measured values; every knob is exposed through CohortSpec.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/channels.hpp"
#include "somnoradar/common.hpp"
#include "somnoradar/radar_cube.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::synth {

inline constexpr double kTruthRateHz = 50.0;  // master physiological timeline
inline constexpr double kEpochSeconds = 30.0;
inline constexpr double kBeltRateHz = 50.0;
inline constexpr double kImuRateHz = 25.0;
inline constexpr double kCarrierWavelengthM = 0.041;  // ~7.3 GHz center
// ~8 mm abdominal wall excursion; puts the phase modulation index near the
// first Bessel null so the clutter-removed trajectory stays off the origin
inline constexpr double kChestDisplacementM = 0.008;

struct StageParams {
    double rate_mean_bpm = 14.0;
    double rate_sd_bpm = 1.5;
    double amplitude = 1.0;         // relative breathing depth
    double amp_variability = 0.15;  // slow modulation of the depth
    double burst_rate_per_hour = 3.0;
};

struct CohortSpec {
    int subjects = 8;
    int night_epochs = 120;
    // transition matrix rows: from W, REM, LS, DS
    std::array<std::array<double, 4>, 4> transition = {{
        {0.88, 0.02, 0.10, 0.00},
        {0.05, 0.93, 0.02, 0.00},
        {0.03, 0.02, 0.92, 0.03},
        {0.01, 0.00, 0.05, 0.94},
    }};
    std::array<StageParams, 4> stages = {{
        {16.0, 3.0, 0.90, 0.25, 30.0},  // W
        {15.0, 2.5, 0.95, 0.30, 6.0},   // REM
        {14.0, 1.5, 1.00, 0.15, 3.0},   // LS
        {13.0, 0.8, 0.80, 0.05, 1.0},   // DS
    }};

    // domain-shift knobs
    double radar_snr_db = 12.0;
    double multipath_level = 0.15;
    // range-bin span of breathing-modulated reflections (torso, limbs,
    // bedding); a sleeping body fills the 0.5 m observation half-width
    int torso_bins = 25;
    double belt_distortion = 0.25;
    bool dual_position = false;  // also emit an overhead-position cube per night

    // radar geometry (defaults are synthgen's, not measured hardware values)
    double frame_rate = 20.0;
    std::size_t range_bins = 64;
    double bin_size_m = 0.05;

    std::uint64_t seed = 1;

    void validate() const {
        if (subjects < 1) throw ConfigError("cohort spec: subjects must be >= 1");
        if (night_epochs < 2) throw ConfigError("cohort spec: night_epochs must be >= 2");
        for (const auto& row : transition) {
            double sum = 0.0;
            for (double p : row) {
                if (p < 0.0) throw ConfigError("cohort spec: negative transition probability");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw ConfigError("cohort spec: transition rows must sum to 1");
        }
        for (const auto& s : stages) {
            if (s.rate_mean_bpm < 6.0 || s.rate_mean_bpm > 36.0)
                throw ConfigError("cohort spec: stage respiration rate outside 6-36 bpm");
        }
        if (torso_bins < 1) throw ConfigError("cohort spec: torso_bins must be >= 1");
        if (range_bins < 8) throw ConfigError("cohort spec: need >= 8 range bins");
    }
};

inline void to_json(nlohmann::json& j, const StageParams& s) {
    j = {{"rate_mean_bpm", s.rate_mean_bpm},
         {"rate_sd_bpm", s.rate_sd_bpm},
         {"amplitude", s.amplitude},
         {"amp_variability", s.amp_variability},
         {"burst_rate_per_hour", s.burst_rate_per_hour}};
}

inline void from_json(const nlohmann::json& j, StageParams& s) {
    j.at("rate_mean_bpm").get_to(s.rate_mean_bpm);
    j.at("rate_sd_bpm").get_to(s.rate_sd_bpm);
    j.at("amplitude").get_to(s.amplitude);
    j.at("amp_variability").get_to(s.amp_variability);
    j.at("burst_rate_per_hour").get_to(s.burst_rate_per_hour);
}

inline void to_json(nlohmann::json& j, const CohortSpec& c) {
    j = {{"subjects", c.subjects},
         {"night_epochs", c.night_epochs},
         {"transition", c.transition},
         {"stages",
          {{"W", c.stages[0]}, {"REM", c.stages[1]}, {"LS", c.stages[2]}, {"DS", c.stages[3]}}},
         {"radar_snr_db", c.radar_snr_db},
         {"multipath_level", c.multipath_level},
         {"torso_bins", c.torso_bins},
         {"belt_distortion", c.belt_distortion},
         {"dual_position", c.dual_position},
         {"frame_rate", c.frame_rate},
         {"range_bins", c.range_bins},
         {"bin_size_m", c.bin_size_m},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CohortSpec& c) {
    j.at("subjects").get_to(c.subjects);
    j.at("night_epochs").get_to(c.night_epochs);
    j.at("transition").get_to(c.transition);
    const auto& st = j.at("stages");
    st.at("W").get_to(c.stages[0]);
    st.at("REM").get_to(c.stages[1]);
    st.at("LS").get_to(c.stages[2]);
    st.at("DS").get_to(c.stages[3]);
    if (j.contains("radar_snr_db")) j.at("radar_snr_db").get_to(c.radar_snr_db);
    if (j.contains("multipath_level")) j.at("multipath_level").get_to(c.multipath_level);
    if (j.contains("torso_bins")) j.at("torso_bins").get_to(c.torso_bins);
    if (j.contains("belt_distortion")) j.at("belt_distortion").get_to(c.belt_distortion);
    if (j.contains("dual_position")) j.at("dual_position").get_to(c.dual_position);
    if (j.contains("frame_rate")) j.at("frame_rate").get_to(c.frame_rate);
    if (j.contains("range_bins")) j.at("range_bins").get_to(c.range_bins);
    if (j.contains("bin_size_m")) j.at("bin_size_m").get_to(c.bin_size_m);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    c.validate();
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

struct MovementBurst {
    double start_s = 0.0;
    double duration_s = 1.0;
    double intensity = 1.0;
};

struct GroundTruthNight {
    std::vector<Stage> hypnogram;        // per 30-s epoch
    std::vector<double> rate_bpm;        // at kTruthRateHz
    std::vector<double> amplitude;       // breathing depth, at kTruthRateHz
    std::vector<double> displacement;    // unit-depth chest motion, at kTruthRateHz
    std::vector<double> burst_envelope;  // at kTruthRateHz
    std::vector<MovementBurst> bursts;
    std::size_t subject_bin = 0;

    double epoch_mean_rate_bpm(std::size_t epoch) const {
        auto per_epoch = static_cast<std::size_t>(kEpochSeconds * kTruthRateHz);
        std::size_t lo = epoch * per_epoch;
        std::size_t hi = std::min(rate_bpm.size(), lo + per_epoch);
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += rate_bpm[i];
        return acc / static_cast<double>(hi - lo);
    }
};

/// Markov stage sequence starting in W; reproducible from the seed alone.
inline std::vector<Stage> sample_hypnogram(const CohortSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed ^ 0x68797076ULL);
    std::vector<Stage> out(static_cast<std::size_t>(spec.night_epochs));
    int current = 0;  // W
    out[0] = Stage::Wake;
    for (std::size_t e = 1; e < out.size(); ++e) {
        double u = rng.uniform();
        double acc = 0.0;
        int next = 3;
        for (int s = 0; s < 4; ++s) {
            acc += spec.transition[static_cast<std::size_t>(current)][static_cast<std::size_t>(s)];
            if (u < acc) {
                next = s;
                break;
            }
        }
        current = next;
        out[e] = static_cast<Stage>(next);
    }
    return out;
}

/// Builds the full physiological timeline for one night.
inline GroundTruthNight make_truth(const CohortSpec& spec, std::uint64_t seed) {
    spec.validate();
    GroundTruthNight truth;
    truth.hypnogram = sample_hypnogram(spec, seed);
    Rng rng(seed ^ 0x74727574ULL);

    const auto samples = static_cast<std::size_t>(static_cast<double>(spec.night_epochs) *
                                                  kEpochSeconds * kTruthRateHz);
    const auto per_epoch = static_cast<std::size_t>(kEpochSeconds * kTruthRateHz);
    truth.rate_bpm.resize(samples);
    truth.amplitude.resize(samples);
    truth.displacement.resize(samples);
    truth.burst_envelope.assign(samples, 0.0);

    // Ornstein-Uhlenbeck rate and depth processes pulled toward per-stage
    // means; time constants keep transitions smooth for the sifting stage.
    const double dt = 1.0 / kTruthRateHz;
    const double tau_rate = 25.0, tau_amp = 45.0;
    double rate = spec.stages[0].rate_mean_bpm;
    double amp = spec.stages[0].amplitude;
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t i = 0; i < samples; ++i) {
        const auto epoch = std::min(i / per_epoch, truth.hypnogram.size() - 1);
        const auto& sp = spec.stages[static_cast<std::size_t>(truth.hypnogram[epoch])];
        rate += (sp.rate_mean_bpm - rate) * dt / tau_rate +
                sp.rate_sd_bpm * std::sqrt(2.0 * dt / tau_rate) * rng.normal();
        rate = std::min(35.5, std::max(6.5, rate));
        amp += (sp.amplitude - amp) * dt / tau_amp +
               sp.amplitude * sp.amp_variability * std::sqrt(2.0 * dt / tau_amp) * rng.normal();
        amp = std::max(0.1, amp);
        phase += 2.0 * M_PI * (rate / 60.0) * dt;
        truth.rate_bpm[i] = rate;
        truth.amplitude[i] = amp;
        truth.displacement[i] = amp * (std::sin(phase) + 0.10 * std::sin(2.0 * phase));
    }

    // movement bursts: Poisson per stage
    for (std::size_t e = 0; e < truth.hypnogram.size(); ++e) {
        const auto& sp = spec.stages[static_cast<std::size_t>(truth.hypnogram[e])];
        double p_burst = sp.burst_rate_per_hour * kEpochSeconds / 3600.0;
        if (rng.uniform() >= p_burst) continue;
        MovementBurst b;
        b.start_s = (static_cast<double>(e) + rng.uniform()) * kEpochSeconds;
        b.duration_s = rng.uniform(0.5, 3.5);
        b.intensity = rng.uniform(0.6, 2.0);
        truth.bursts.push_back(b);
        auto lo = static_cast<std::size_t>(b.start_s * kTruthRateHz);
        auto hi = std::min(samples, lo + static_cast<std::size_t>(b.duration_s * kTruthRateHz));
        for (std::size_t i = lo; i < hi; ++i) {
            double frac = static_cast<double>(i - lo) / std::max<double>(1.0, (hi - lo));
            double env = 0.5 - 0.5 * std::cos(2.0 * M_PI * frac);  // raised cosine
            truth.burst_envelope[i] = std::max(truth.burst_envelope[i], b.intensity * env);
        }
    }

    // subject somewhere in the middle half of the unambiguous range
    std::size_t lo_bin = spec.range_bins / 4;
    std::size_t hi_bin = 3 * spec.range_bins / 4;
    truth.subject_bin = lo_bin + rng.uniform_int(hi_bin - lo_bin);
    return truth;
}

// ---------------------------------------------------------------------------
// Source-domain (PSG) synthesis
// ---------------------------------------------------------------------------

struct PsgNight {
    Waveform belt;                // 50 Hz respiration belt
    channels::TriaxialSeries imu;  // 25 Hz wrist accelerometer
};

inline PsgNight synth_psg_night(const GroundTruthNight& truth, const CohortSpec& spec,
                                std::uint64_t seed) {
    Rng rng(seed ^ 0x70736721ULL);
    PsgNight night;
    const std::size_t n_belt = truth.displacement.size();  // truth runs at the belt rate

    night.belt.rate = kBeltRateHz;
    night.belt.channel = Channel::Respiration;
    night.belt.origin = Origin::PsgBelt;
    night.belt.values.resize(n_belt);
    double drift = 0.0;
    for (std::size_t i = 0; i < n_belt; ++i) {
        drift = 0.9995 * drift + 0.002 * rng.normal();
        // square-law term mimics inductance-belt distortion; it is the
        // source-domain waveform-shape signature
        double d = truth.displacement[i];
        double shape = d + spec.belt_distortion * (d * d - 0.5 * truth.amplitude[i]);
        night.belt.values[i] = shape + drift + 0.05 * rng.normal();
    }

    const auto n_imu = static_cast<std::size_t>(static_cast<double>(n_belt) * kImuRateHz /
                                                kTruthRateHz);
    night.imu.rate = kImuRateHz;
    night.imu.acc_x.resize(n_imu);
    night.imu.acc_y.resize(n_imu);
    night.imu.acc_z.resize(n_imu);
    for (std::size_t i = 0; i < n_imu; ++i) {
        auto ti = std::min(n_belt - 1, static_cast<std::size_t>(static_cast<double>(i) *
                                                                kTruthRateHz / kImuRateHz));
        double burst = truth.burst_envelope[ti];
        double bx = burst > 0.0 ? 0.4 * burst * rng.normal() : 0.0;
        double by = burst > 0.0 ? 0.4 * burst * rng.normal() : 0.0;
        double bz = burst > 0.0 ? 0.4 * burst * rng.normal() : 0.0;
        night.imu.acc_x[i] = bx + 0.01 * rng.normal();
        night.imu.acc_y[i] = by + 0.01 * rng.normal();
        night.imu.acc_z[i] = 1.0 + bz + 0.01 * rng.normal();  // gravity
    }
    return night;
}

// ---------------------------------------------------------------------------
// Target-domain (radar) synthesis
// ---------------------------------------------------------------------------

struct RadarSceneOptions {
    double snr_db = 10.0;
    double multipath_level = 0.15;
    double burst_gain = 1.0;
    int clutter_reflectors = 8;
};

/// Received-signal model: static reflectors plus torso scatterers whose
/// delay follows the true chest displacement, a multipath ghost, broadband
/// burst transients and complex white noise.
inline RadarCube synth_radar_night(const GroundTruthNight& truth, const CohortSpec& spec,
                                   std::uint64_t seed, const RadarSceneOptions& opts) {
    spec.validate();
    Rng rng(seed ^ 0x72616472ULL);
    const auto frames = static_cast<std::size_t>(
        std::llround(static_cast<double>(spec.night_epochs) * kEpochSeconds * spec.frame_rate));
    RadarCube cube(frames, spec.range_bins, spec.frame_rate, spec.bin_size_m);

    const double sigma_pulse = 2.0 * spec.bin_size_m / 2.355;  // FWHM of two bins
    const double support = 3.0 * sigma_pulse;
    auto pulse = [&](double x) -> std::complex<double> {
        if (std::abs(x) > support) return {0.0, 0.0};
        double envelope = std::exp(-x * x / (2.0 * sigma_pulse * sigma_pulse));
        double ph = -4.0 * M_PI * x / kCarrierWavelengthM;
        return std::polar(envelope, ph);
    };

    // static clutter, fixed over slow time
    std::vector<std::complex<double>> clutter(spec.range_bins, {0.0, 0.0});
    for (int i = 0; i < opts.clutter_reflectors; ++i) {
        double range = rng.uniform(1.0, static_cast<double>(spec.range_bins - 2)) * spec.bin_size_m;
        std::complex<double> amp = std::polar(rng.uniform(1.0, 4.0), rng.uniform(0.0, 2.0 * M_PI));
        for (std::size_t b = 0; b < spec.range_bins; ++b)
            clutter[b] += amp * pulse(static_cast<double>(b) * spec.bin_size_m - range);
    }

    // torso scatterers centered on the subject bin
    struct Scatterer {
        double range0;
        double disp_scale;
        double amp;
        double phase0;
    };
    // Scatterers every ~3 bins across the body span: farther apart than the
    // pulse support, so each range bin is dominated by a single return and
    // neighboring returns cannot form interference nulls. Bins between
    // scatterers stay weak and are gated out downstream; breathing depth and
    // reflectivity taper toward the span edges (limbs and bedding move less
    // than the chest).
    std::vector<Scatterer> torso;
    const int span = spec.torso_bins;
    const double torso_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double night_depth = rng.uniform(0.92, 1.08);
    const int n_scatter = std::max(1, span / 3);
    for (int j = 0; j < n_scatter; ++j) {
        Scatterer sc;
        double centered = n_scatter > 1
                              ? (static_cast<double>(j) / (n_scatter - 1) - 0.5) * (span - 1)
                              : 0.0;
        centered += rng.uniform(-0.3, 0.3);
        sc.range0 = (static_cast<double>(truth.subject_bin) + centered) * spec.bin_size_m;
        double taper = span > 1 ? std::cos(M_PI * centered / static_cast<double>(span)) : 1.0;
        // near-uniform breathing depth: strongly differential motion across
        // bins would wind neighboring returns against each other
        sc.disp_scale = (0.85 + 0.15 * taper * taper) * night_depth;
        sc.amp = (0.30 + 0.70 * taper * taper) * rng.uniform(0.85, 1.15);
        sc.phase0 = torso_phase + rng.uniform(-0.6, 0.6);
        torso.push_back(sc);
    }

    const double noise_sigma = std::pow(10.0, -opts.snr_db / 20.0);
    const double ghost_range = (static_cast<double>(truth.subject_bin) + 8.0) * spec.bin_size_m;

    double body_shift = 0.0;  // slow cm-scale wander during bursts
    for (std::size_t t = 0; t < frames; ++t) {
        auto ti = std::min(truth.displacement.size() - 1,
                           static_cast<std::size_t>(static_cast<double>(t) * kTruthRateHz /
                                                    spec.frame_rate));
        const double chest = kChestDisplacementM * truth.displacement[ti];
        const double burst = truth.burst_envelope[ti] * opts.burst_gain;
        if (burst > 0.0)
            body_shift += 0.004 * burst * rng.normal();
        else
            body_shift *= 0.995;
        body_shift = std::min(0.02, std::max(-0.02, body_shift));

        for (std::size_t b = 0; b < spec.range_bins; ++b) cube.at(t, b) = clutter[b];
        for (const auto& sc : torso) {
            // the body translates as a whole during bursts; breathing depth
            // varies mildly across the torso
            double range = sc.range0 - sc.disp_scale * chest - body_shift;
            std::complex<double> rot = std::polar(sc.amp, sc.phase0);
            for (std::size_t b = 0; b < spec.range_bins; ++b) {
                double x = static_cast<double>(b) * spec.bin_size_m - range;
                if (std::abs(x) > support) continue;
                cube.at(t, b) += rot * pulse(x);
            }
        }
        if (opts.multipath_level > 0.0) {
            double range = ghost_range - 1.3 * chest;
            for (std::size_t b = 0; b < spec.range_bins; ++b) {
                double x = static_cast<double>(b) * spec.bin_size_m - range;
                if (std::abs(x) > support) continue;
                cube.at(t, b) += opts.multipath_level * pulse(x);
            }
        }
        for (std::size_t b = 0; b < spec.range_bins; ++b) {
            std::complex<double> noise{rng.normal(), rng.normal()};
            cube.at(t, b) += noise_sigma * noise;
            if (burst > 0.0) {
                std::complex<double> transient{rng.normal(), rng.normal()};
                cube.at(t, b) += 0.5 * burst * transient;
            }
        }
    }
    return cube;
}

inline RadarCube synth_radar_night(const GroundTruthNight& truth, const CohortSpec& spec,
                                   std::uint64_t seed) {
    RadarSceneOptions opts;
    opts.snr_db = spec.radar_snr_db;
    opts.multipath_level = spec.multipath_level;
    return synth_radar_night(truth, spec, seed, opts);
}

}  // namespace somnoradar::synth
