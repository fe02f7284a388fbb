#pragma once

// Whole-night inference: sliding-window prediction, multiplicative ensemble
// fusion in log space, entropy-based confidence and hypnogram emission.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"
#include "somnoradar/metrics.hpp"
#include "somnoradar/net.hpp"

namespace somnoradar::infer {

struct Decision {
    std::array<double, 4> log_probs;
    std::size_t sequence_start = 0;  // offset of the window that produced it
};

struct PosteriorEnsemble {
    std::vector<std::vector<Decision>> per_epoch;
    bool short_night_fallback = false;  // night shorter than L_seq
};

struct StagedEpoch {
    std::size_t epoch_index = 0;
    std::array<double, 4> fused_log_probs{};
    Stage predicted = Stage::Wake;
    double confidence = 0.0;
};

// ---------------------------------------------------------------------------
// Sliding prediction
// ---------------------------------------------------------------------------

struct NightInput {
    std::vector<double> respiration;  // 10 Hz, normalized, epochs * 300
    std::vector<double> activity;
    std::size_t epochs() const { return respiration.size() / 300; }
};

namespace detail {

template <class Scalar>
net::SeqBatch<Scalar> window_batch(const NightInput& night, const std::vector<std::size_t>& starts,
                                   int l_seq, int epoch_samples) {
    net::SeqBatch<Scalar> batch;
    batch.batch = static_cast<int>(starts.size());
    batch.len = l_seq;
    const auto cols = static_cast<Eigen::Index>(starts.size()) * l_seq * epoch_samples;
    batch.respiration.resize(1, cols);
    batch.activity.resize(1, cols);
    for (std::size_t w = 0; w < starts.size(); ++w) {
        const std::size_t sample0 = starts[w] * static_cast<std::size_t>(epoch_samples);
        const auto base = static_cast<Eigen::Index>(w) * l_seq * epoch_samples;
        for (int i = 0; i < l_seq * epoch_samples; ++i) {
            batch.respiration(0, base + i) = static_cast<Scalar>(night.respiration[sample0 + i]);
            batch.activity(0, base + i) = static_cast<Scalar>(night.activity[sample0 + i]);
        }
    }
    return batch;
}

}  // namespace detail

/// One forward pass per start offset (stride one epoch); epoch m collects the
/// posteriors of every window containing it. Nights shorter than L_seq run a
/// single truncated window and set the fallback flag.
template <class Scalar>
PosteriorEnsemble sliding_predict(const NightInput& night, net::StagingModel<Scalar>& model,
                                  int l_seq, int window_batch_size = 16) {
    const std::size_t n = night.epochs();
    if (n == 0) throw InsufficientDataError("sliding_predict: empty night");
    const int epoch_samples = model.config().epoch_samples;
    PosteriorEnsemble ens;
    ens.per_epoch.resize(n);

    int effective_l = l_seq;
    if (n < static_cast<std::size_t>(l_seq)) {
        ens.short_night_fallback = true;
        effective_l = static_cast<int>(n);
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + static_cast<std::size_t>(effective_l) <= n; ++s) starts.push_back(s);

    for (std::size_t w0 = 0; w0 < starts.size(); w0 += static_cast<std::size_t>(window_batch_size)) {
        std::vector<std::size_t> chunk(
            starts.begin() + static_cast<std::ptrdiff_t>(w0),
            starts.begin() + static_cast<std::ptrdiff_t>(
                                 std::min(starts.size(), w0 + window_batch_size)));
        auto batch = detail::window_batch<Scalar>(night, chunk, effective_l, epoch_samples);
        auto z = model.extract(batch, net::Mode::Eval);
        auto probs = net::softmax_columns(model.classify_logits(z));
        for (std::size_t w = 0; w < chunk.size(); ++w) {
            for (int t = 0; t < effective_l; ++t) {
                Decision d;
                d.sequence_start = chunk[w];
                const auto col = static_cast<Eigen::Index>(w) * effective_l + t;
                for (int c = 0; c < 4; ++c) {
                    double p = std::max(1e-12, static_cast<double>(probs(c, col)));
                    d.log_probs[static_cast<std::size_t>(c)] = std::log(p);
                }
                ens.per_epoch[chunk[w] + static_cast<std::size_t>(t)].push_back(d);
            }
        }
    }
    return ens;
}

// ---------------------------------------------------------------------------
// Fusion and confidence
// ---------------------------------------------------------------------------

/// Mean of log-posteriors over the available decisions for each epoch
/// (boundary epochs divide by their actual decision count).
inline std::vector<std::array<double, 4>> aggregate(const PosteriorEnsemble& ens) {
    std::vector<std::array<double, 4>> fused(ens.per_epoch.size());
    for (std::size_t e = 0; e < ens.per_epoch.size(); ++e) {
        const auto& decisions = ens.per_epoch[e];
        if (decisions.empty()) throw InsufficientDataError("aggregate: epoch without decisions");
        std::array<double, 4> acc{0.0, 0.0, 0.0, 0.0};
        for (const auto& d : decisions)
            for (int c = 0; c < 4; ++c) acc[static_cast<std::size_t>(c)] += d.log_probs[static_cast<std::size_t>(c)];
        for (int c = 0; c < 4; ++c)
            fused[e][static_cast<std::size_t>(c)] =
                acc[static_cast<std::size_t>(c)] / static_cast<double>(decisions.size());
    }
    return fused;
}

/// gamma = 1 - H(p)/log(4) on a probability simplex.
inline double confidence(const std::array<double, 4>& probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return 1.0 - h / std::log(4.0);
}

/// Re-normalizes fused log-probabilities to a simplex and scores confidence.
inline std::array<double, 4> fused_to_simplex(const std::array<double, 4>& log_probs) {
    double mx = *std::max_element(log_probs.begin(), log_probs.end());
    std::array<double, 4> p{};
    double sum = 0.0;
    for (int c = 0; c < 4; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(log_probs[static_cast<std::size_t>(c)] - mx);
        sum += p[static_cast<std::size_t>(c)];
    }
    for (double& v : p) v /= sum;
    return p;
}

/// Argmax with ties broken toward the lowest class index (W, REM, LS, DS).
inline Stage argmax_stage(const std::array<double, 4>& values) {
    int best = 0;
    for (int c = 1; c < 4; ++c)
        if (values[static_cast<std::size_t>(c)] > values[static_cast<std::size_t>(best)]) best = c;
    return static_cast<Stage>(best);
}

inline std::vector<StagedEpoch> stage_night(const PosteriorEnsemble& ens) {
    auto fused = aggregate(ens);
    std::vector<StagedEpoch> out(fused.size());
    for (std::size_t e = 0; e < fused.size(); ++e) {
        out[e].epoch_index = e;
        out[e].fused_log_probs = fused[e];
        out[e].predicted = argmax_stage(fused[e]);
        out[e].confidence = confidence(fused_to_simplex(fused[e]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hypnogram emission
// ---------------------------------------------------------------------------

/// Restricts staged epochs to the lights-off .. lights-on window and builds
/// the hypnogram record.
inline metrics::Hypnogram emit_hypnogram(const std::vector<StagedEpoch>& staged,
                                         std::size_t lights_off, std::size_t lights_on) {
    if (!(lights_off < lights_on && lights_on <= staged.size()))
        throw BoundsError("emit_hypnogram: markers outside the record");
    metrics::Hypnogram h;
    h.stages.resize(staged.size());
    h.confidence.resize(staged.size());
    for (std::size_t e = 0; e < staged.size(); ++e) {
        h.stages[e] = staged[e].predicted;
        h.confidence[e] = staged[e].confidence;
    }
    h.lights_off = lights_off;
    h.lights_on = lights_on;
    return h;
}

struct HypnogramSidecar {
    std::string night_id;
    int l_seq = 0;
    std::string model_checksum;
    std::size_t lights_off = 0;
    std::size_t lights_on = 0;
};

inline void write_hypnogram_csv(const metrics::Hypnogram& h, const HypnogramSidecar& sidecar,
                                const std::string& path) {
    h.validate();
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw FormatError("cannot open for write: " + path);
    std::fputs("epoch_index,onset_seconds,stage,confidence\n", f);
    for (std::size_t e = 0; e < h.stages.size(); ++e) {
        double conf = h.confidence.empty() ? 0.0 : h.confidence[e];
        std::fprintf(f, "%zu,%.1f,%s,%.9f\n", e, static_cast<double>(e) * 30.0,
                     stage_name(h.stages[e]), conf);
    }
    std::fclose(f);
    nlohmann::json j = {{"night_id", sidecar.night_id},
                        {"l_seq", sidecar.l_seq},
                        {"model_checksum", sidecar.model_checksum},
                        {"lights_off", h.lights_off},
                        {"lights_on", h.lights_on}};
    std::ofstream s(path + ".json");
    if (!s) throw FormatError("cannot open for write: " + path + ".json");
    s << j.dump(2) << "\n";
}

inline metrics::Hypnogram read_hypnogram_csv(const std::string& path,
                                             HypnogramSidecar* sidecar = nullptr) {
    std::ifstream meta(path + ".json");
    if (!meta) throw FormatError("missing hypnogram sidecar: " + path + ".json");
    nlohmann::json j = nlohmann::json::parse(meta);
    metrics::Hypnogram h;
    h.lights_off = j.at("lights_off").get<std::size_t>();
    h.lights_on = j.at("lights_on").get<std::size_t>();
    if (sidecar) {
        sidecar->night_id = j.at("night_id").get<std::string>();
        sidecar->l_seq = j.at("l_seq").get<int>();
        sidecar->model_checksum = j.at("model_checksum").get<std::string>();
        sidecar->lights_off = h.lights_off;
        sidecar->lights_on = h.lights_on;
    }
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("epoch_index,", 0) != 0)
        throw FormatError("bad hypnogram header in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1), p3 = line.find(',', p2 + 1);
        if (p3 == std::string::npos) throw FormatError("bad hypnogram row in " + path);
        h.stages.push_back(stage_from_name(line.substr(p2 + 1, p3 - p2 - 1)));
        h.confidence.push_back(std::stod(line.substr(p3 + 1)));
    }
    h.validate();
    return h;
}

}  // namespace somnoradar::infer
