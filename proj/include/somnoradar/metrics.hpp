#pragma once

// Clinical sleep parameters from hypnograms and agreement statistics between
// predicted and reference hypnograms.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"

namespace somnoradar::metrics {

inline constexpr double kEpochMinutes = 0.5;

struct Hypnogram {
    std::vector<Stage> stages;        // one per 30-s epoch
    std::vector<double> confidence;   // optional, empty or same length
    std::size_t lights_off = 0;       // epoch index
    std::size_t lights_on = 0;        // epoch index, exclusive upper bound

    void validate() const {
        if (!(lights_off < lights_on && lights_on <= stages.size()))
            throw BoundsError("hypnogram: need lights_off < lights_on <= length");
        if (!confidence.empty() && confidence.size() != stages.size())
            throw ShapeError("hypnogram: confidence length mismatch");
    }
    std::size_t span_epochs() const { return lights_on - lights_off; }
};

// ---------------------------------------------------------------------------
// Sleep parameters
// ---------------------------------------------------------------------------

struct SleepSummary {
    double time_in_bed_min = 0.0;
    double total_sleep_min = 0.0;            // TST
    double sleep_onset_latency_min = 0.0;    // SOL
    double wake_after_onset_min = 0.0;       // WASO
    double sleep_efficiency_pct = 0.0;       // SE
    std::optional<double> rem_latency_min;   // from sleep onset; missing if no REM
    double rem_pct_tst = 0.0;
    double light_pct_tst = 0.0;
    double deep_pct_tst = 0.0;
};

inline SleepSummary sleep_parameters(const Hypnogram& h) {
    h.validate();
    SleepSummary s;
    const std::size_t lo = h.lights_off, hi = h.lights_on;
    s.time_in_bed_min = static_cast<double>(hi - lo) * kEpochMinutes;

    std::size_t onset = hi;  // first non-wake epoch within the span
    for (std::size_t e = lo; e < hi; ++e) {
        if (h.stages[e] != Stage::Wake) {
            onset = e;
            break;
        }
    }
    s.sleep_onset_latency_min = static_cast<double>(onset - lo) * kEpochMinutes;

    std::size_t sleep_epochs = 0, wake_after = 0, rem = 0, light = 0, deep = 0;
    std::size_t first_rem = hi;
    for (std::size_t e = onset; e < hi; ++e) {
        switch (h.stages[e]) {
            case Stage::Wake: ++wake_after; break;
            case Stage::Rem:
                ++rem;
                ++sleep_epochs;
                if (first_rem == hi) first_rem = e;
                break;
            case Stage::Light:
                ++light;
                ++sleep_epochs;
                break;
            case Stage::Deep:
                ++deep;
                ++sleep_epochs;
                break;
        }
    }
    s.total_sleep_min = static_cast<double>(sleep_epochs) * kEpochMinutes;
    s.wake_after_onset_min = static_cast<double>(wake_after) * kEpochMinutes;
    s.sleep_efficiency_pct =
        s.time_in_bed_min > 0.0 ? 100.0 * s.total_sleep_min / s.time_in_bed_min : 0.0;
    if (first_rem < hi)
        s.rem_latency_min = static_cast<double>(first_rem - onset) * kEpochMinutes;
    if (sleep_epochs > 0) {
        s.rem_pct_tst = 100.0 * static_cast<double>(rem) / static_cast<double>(sleep_epochs);
        s.light_pct_tst = 100.0 * static_cast<double>(light) / static_cast<double>(sleep_epochs);
        s.deep_pct_tst = 100.0 * static_cast<double>(deep) / static_cast<double>(sleep_epochs);
    }
    return s;
}

inline void to_json(nlohmann::json& j, const SleepSummary& s) {
    j = {{"time_in_bed_min", s.time_in_bed_min},
         {"total_sleep_min", s.total_sleep_min},
         {"sleep_onset_latency_min", s.sleep_onset_latency_min},
         {"wake_after_onset_min", s.wake_after_onset_min},
         {"sleep_efficiency_pct", s.sleep_efficiency_pct},
         {"rem_pct_tst", s.rem_pct_tst},
         {"light_pct_tst", s.light_pct_tst},
         {"deep_pct_tst", s.deep_pct_tst}};
    if (s.rem_latency_min)
        j["rem_latency_min"] = *s.rem_latency_min;
    else
        j["rem_latency_min"] = nullptr;
}

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

struct AgreementReport {
    std::array<std::array<std::size_t, 4>, 4> confusion{};  // [reference][predicted]
    double accuracy = 0.0;
    std::array<double, 4> f1{};
    double kappa = 0.0;
    std::size_t epochs = 0;
};

/// Epoch-wise agreement over the intersection of the lights spans. The
/// hypnograms must cover the same night grid (equal lengths).
inline AgreementReport agreement(const Hypnogram& predicted, const Hypnogram& reference) {
    predicted.validate();
    reference.validate();
    if (predicted.stages.size() != reference.stages.size())
        throw AlignmentError("agreement: hypnogram lengths differ");
    const std::size_t lo = std::max(predicted.lights_off, reference.lights_off);
    const std::size_t hi = std::min(predicted.lights_on, reference.lights_on);
    if (lo >= hi) throw AlignmentError("agreement: lights spans do not intersect");

    AgreementReport r;
    r.epochs = hi - lo;
    std::size_t agree = 0;
    for (std::size_t e = lo; e < hi; ++e) {
        auto p = static_cast<std::size_t>(predicted.stages[e]);
        auto t = static_cast<std::size_t>(reference.stages[e]);
        r.confusion[t][p] += 1;
        if (p == t) ++agree;
    }
    const auto total = static_cast<double>(r.epochs);
    r.accuracy = static_cast<double>(agree) / total;

    double expected = 0.0;
    for (int c = 0; c < 4; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        std::size_t tp = r.confusion[ci][ci], fp = 0, fn = 0, ref_count = 0, pred_count = 0;
        for (int k = 0; k < 4; ++k) {
            const auto ki = static_cast<std::size_t>(k);
            ref_count += r.confusion[ci][ki];
            pred_count += r.confusion[ki][ci];
        }
        fp = pred_count - tp;
        fn = ref_count - tp;
        const double denom = static_cast<double>(2 * tp + fp + fn);
        // class absent from both raters: vacuous perfect agreement
        r.f1[ci] = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 1.0;
        expected += (static_cast<double>(ref_count) / total) *
                    (static_cast<double>(pred_count) / total);
    }
    r.kappa = expected < 1.0 ? (r.accuracy - expected) / (1.0 - expected) : 1.0;
    return r;
}

inline void to_json(nlohmann::json& j, const AgreementReport& r) {
    j = {{"accuracy", r.accuracy},
         {"kappa", r.kappa},
         {"epochs", r.epochs},
         {"f1", {{"W", r.f1[0]}, {"REM", r.f1[1]}, {"LS", r.f1[2]}, {"DS", r.f1[3]}}},
         {"confusion", r.confusion}};
}

// ---------------------------------------------------------------------------
// Cohort bias
// ---------------------------------------------------------------------------

struct BiasEntry {
    double mean = 0.0;
    double sd = 0.0;
};

struct CohortBias {
    BiasEntry tst, waso, sol, se, rem_pct, light_pct, deep_pct;
    std::optional<double> pearson_se;   // undefined for constant series
    std::optional<double> pearson_sol;
    std::size_t nights = 0;
};

namespace detail {

inline BiasEntry bias_of(const std::vector<double>& diffs) {
    BiasEntry b;
    b.mean = mean_of(diffs);
    b.sd = sample_stddev_of(diffs);
    return b;
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = mean_of(a), mb = mean_of(b);
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    if (da <= 0.0 || db <= 0.0) return std::nullopt;
    return num / std::sqrt(da * db);
}

}  // namespace detail

/// Per-parameter mean +/- SD of (predicted - reference) over paired nights,
/// with Pearson correlation reported for SE and SOL.
inline CohortBias cohort_bias(const std::vector<SleepSummary>& predicted,
                              const std::vector<SleepSummary>& reference) {
    if (predicted.size() != reference.size())
        throw AlignmentError("cohort_bias: night counts differ");
    if (predicted.size() < 2) throw StatisticsError("cohort_bias: need at least 2 paired nights");
    CohortBias out;
    out.nights = predicted.size();
    std::vector<double> d_tst, d_waso, d_sol, d_se, d_rem, d_light, d_deep;
    std::vector<double> se_pred, se_ref, sol_pred, sol_ref;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        d_tst.push_back(predicted[i].total_sleep_min - reference[i].total_sleep_min);
        d_waso.push_back(predicted[i].wake_after_onset_min - reference[i].wake_after_onset_min);
        d_sol.push_back(predicted[i].sleep_onset_latency_min -
                        reference[i].sleep_onset_latency_min);
        d_se.push_back(predicted[i].sleep_efficiency_pct - reference[i].sleep_efficiency_pct);
        d_rem.push_back(predicted[i].rem_pct_tst - reference[i].rem_pct_tst);
        d_light.push_back(predicted[i].light_pct_tst - reference[i].light_pct_tst);
        d_deep.push_back(predicted[i].deep_pct_tst - reference[i].deep_pct_tst);
        se_pred.push_back(predicted[i].sleep_efficiency_pct);
        se_ref.push_back(reference[i].sleep_efficiency_pct);
        sol_pred.push_back(predicted[i].sleep_onset_latency_min);
        sol_ref.push_back(reference[i].sleep_onset_latency_min);
    }
    out.tst = detail::bias_of(d_tst);
    out.waso = detail::bias_of(d_waso);
    out.sol = detail::bias_of(d_sol);
    out.se = detail::bias_of(d_se);
    out.rem_pct = detail::bias_of(d_rem);
    out.light_pct = detail::bias_of(d_light);
    out.deep_pct = detail::bias_of(d_deep);
    out.pearson_se = detail::pearson(se_pred, se_ref);
    out.pearson_sol = detail::pearson(sol_pred, sol_ref);
    return out;
}

inline void to_json(nlohmann::json& j, const BiasEntry& b) {
    j = {{"mean", b.mean}, {"sd", b.sd}};
}

inline void to_json(nlohmann::json& j, const CohortBias& c) {
    j = {{"nights", c.nights},   {"tst_min", c.tst},       {"waso_min", c.waso},
         {"sol_min", c.sol},     {"se_pct", c.se},         {"rem_pct", c.rem_pct},
         {"light_pct", c.light_pct}, {"deep_pct", c.deep_pct}};
    j["pearson_se"] = c.pearson_se ? nlohmann::json(*c.pearson_se) : nlohmann::json(nullptr);
    j["pearson_sol"] = c.pearson_sol ? nlohmann::json(*c.pearson_sol) : nlohmann::json(nullptr);
}

}  // namespace somnoradar::metrics
