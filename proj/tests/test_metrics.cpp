#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "somnoradar/metrics.hpp"
#include "test_support.hpp"

using namespace somnoradar;
using Catch::Approx;

namespace {

metrics::Hypnogram make_hyp(std::vector<Stage> stages) {
    metrics::Hypnogram h;
    h.lights_off = 0;
    h.lights_on = stages.size();
    h.stages = std::move(stages);
    return h;
}

metrics::Hypnogram random_hyp(std::size_t epochs, Rng& rng) {
    std::vector<Stage> stages(epochs);
    for (auto& s : stages) s = static_cast<Stage>(rng.uniform_int(4));
    return make_hyp(std::move(stages));
}

/// Independent single-pass scan with its own bookkeeping.
struct ScanOracle {
    double tib, sol, tst, waso, se;
    bool has_rem;
    double rem_latency;
};

ScanOracle scan_oracle(const metrics::Hypnogram& h) {
    ScanOracle o{};
    std::size_t span = h.lights_on - h.lights_off;
    o.tib = 0.5 * static_cast<double>(span);
    bool asleep_seen = false;
    std::size_t sol_epochs = 0, sleep = 0, wake_after = 0;
    o.has_rem = false;
    std::size_t onset_idx = 0, rem_idx = 0;
    for (std::size_t e = h.lights_off; e < h.lights_on; ++e) {
        bool is_sleep = h.stages[e] != Stage::Wake;
        if (!asleep_seen && !is_sleep) ++sol_epochs;
        if (!asleep_seen && is_sleep) {
            asleep_seen = true;
            onset_idx = e;
        }
        if (asleep_seen && is_sleep) ++sleep;
        if (asleep_seen && !is_sleep) ++wake_after;
        if (asleep_seen && !o.has_rem && h.stages[e] == Stage::Rem) {
            o.has_rem = true;
            rem_idx = e;
        }
    }
    o.sol = 0.5 * static_cast<double>(sol_epochs);
    o.tst = 0.5 * static_cast<double>(sleep);
    o.waso = 0.5 * static_cast<double>(wake_after);
    o.se = o.tib > 0 ? 100.0 * o.tst / o.tib : 0.0;
    o.rem_latency = o.has_rem ? 0.5 * static_cast<double>(rem_idx - onset_idx) : 0.0;
    return o;
}

}  // namespace

TEST_CASE("sleep_parameters on a simple night", "[metrics][params]") {
    // 8 h span: 20 wake epochs then light sleep
    std::vector<Stage> stages(960, Stage::Light);
    for (int e = 0; e < 20; ++e) stages[static_cast<std::size_t>(e)] = Stage::Wake;
    auto s = metrics::sleep_parameters(make_hyp(std::move(stages)));
    REQUIRE(s.sleep_onset_latency_min == Approx(10.0));
    REQUIRE(s.wake_after_onset_min == Approx(0.0));
    REQUIRE(s.total_sleep_min == Approx(470.0));
    REQUIRE(s.sleep_efficiency_pct == Approx(100.0 * 470.0 / 480.0).margin(0.01));
    REQUIRE(s.light_pct_tst == Approx(100.0).margin(1e-9));
    REQUIRE_FALSE(s.rem_latency_min.has_value());
}

TEST_CASE("sleep_parameters all-wake night", "[metrics][params]") {
    auto s = metrics::sleep_parameters(make_hyp(std::vector<Stage>(100, Stage::Wake)));
    REQUIRE(s.total_sleep_min == 0.0);
    REQUIRE(s.sleep_efficiency_pct == 0.0);
    REQUIRE(s.sleep_onset_latency_min == Approx(50.0));  // the whole span
    REQUIRE_FALSE(s.rem_latency_min.has_value());
}

TEST_CASE("sleep_parameters matches the scan oracle on random nights", "[metrics][params]") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        auto h = random_hyp(60 + rng.uniform_int(200), rng);
        auto s = metrics::sleep_parameters(h);
        auto o = scan_oracle(h);
        REQUIRE(s.time_in_bed_min == o.tib);
        REQUIRE(s.sleep_onset_latency_min == o.sol);
        REQUIRE(s.total_sleep_min == o.tst);
        REQUIRE(s.wake_after_onset_min == o.waso);
        REQUIRE(s.sleep_efficiency_pct == Approx(o.se).margin(1e-9));
        REQUIRE(s.rem_latency_min.has_value() == o.has_rem);
        if (o.has_rem) REQUIRE(*s.rem_latency_min == o.rem_latency);
        // exact epoch arithmetic: SOL + TST + WASO = TIB
        REQUIRE(s.sleep_onset_latency_min + s.total_sleep_min + s.wake_after_onset_min == o.tib);
        // stage percentages of TST sum to 100 when there is sleep
        if (s.total_sleep_min > 0.0)
            REQUIRE(s.rem_pct_tst + s.light_pct_tst + s.deep_pct_tst == Approx(100.0).margin(0.01));
    }
}

TEST_CASE("agreement identity", "[metrics][agreement]") {
    Rng rng(7);
    auto h = random_hyp(200, rng);
    auto r = metrics::agreement(h, h);
    REQUIRE(r.accuracy == 1.0);
    REQUIRE(r.kappa == Approx(1.0).margin(1e-12));
    for (double f1 : r.f1) REQUIRE(f1 == Approx(1.0).margin(1e-12));
}

TEST_CASE("agreement of constant prediction vs balanced reference", "[metrics][agreement]") {
    std::vector<Stage> ref;
    for (int i = 0; i < 100; ++i) ref.push_back(static_cast<Stage>(i % 4));
    auto pred = make_hyp(std::vector<Stage>(100, Stage::Wake));
    auto r = metrics::agreement(pred, make_hyp(std::move(ref)));
    REQUIRE(r.accuracy == Approx(0.25));
    REQUIRE(r.kappa == Approx(0.0).margin(1e-12));
}

TEST_CASE("agreement matches the brute-force confusion oracle", "[metrics][agreement]") {
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        std::size_t n = 50 + rng.uniform_int(150);
        auto a = random_hyp(n, rng);
        auto b = random_hyp(n, rng);
        auto r = metrics::agreement(a, b);

        // oracle: naive double loop over classes
        std::array<std::array<std::size_t, 4>, 4> conf{};
        for (std::size_t e = 0; e < n; ++e)
            conf[static_cast<std::size_t>(b.stages[e])][static_cast<std::size_t>(a.stages[e])]++;
        REQUIRE(conf == r.confusion);
        std::size_t agree = 0;
        for (int c = 0; c < 4; ++c) agree += conf[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
        REQUIRE(r.accuracy == Approx(static_cast<double>(agree) / static_cast<double>(n)).margin(1e-12));
        for (int c = 0; c < 4; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            std::size_t tp = conf[ci][ci], fp = 0, fn = 0;
            for (int k = 0; k < 4; ++k) {
                if (k != c) {
                    fp += conf[static_cast<std::size_t>(k)][ci];
                    fn += conf[ci][static_cast<std::size_t>(k)];
                }
            }
            double denom = static_cast<double>(2 * tp + fp + fn);
            double expect = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 1.0;
            REQUIRE(r.f1[ci] == Approx(expect).margin(1e-9));
        }
        // Cohen's kappa from marginal products
        double pe = 0.0;
        for (int c = 0; c < 4; ++c) {
            double row = 0.0, col = 0.0;
            for (int k = 0; k < 4; ++k) {
                row += static_cast<double>(conf[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)]);
                col += static_cast<double>(conf[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)]);
            }
            pe += (row / static_cast<double>(n)) * (col / static_cast<double>(n));
        }
        double kappa = (r.accuracy - pe) / (1.0 - pe);
        REQUIRE(r.kappa == Approx(kappa).margin(1e-9));

        // row sums equal reference class counts
        for (int c = 0; c < 4; ++c) {
            std::size_t row_sum = 0, ref_count = 0;
            for (int k = 0; k < 4; ++k) row_sum += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
            for (std::size_t e = 0; e < n; ++e)
                if (static_cast<int>(b.stages[e]) == c) ++ref_count;
            REQUIRE(row_sum == ref_count);
        }
    }
}

TEST_CASE("kappa is symmetric", "[metrics][agreement][property]") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t n = 80 + rng.uniform_int(100);
        auto a = random_hyp(n, rng);
        auto b = random_hyp(n, rng);
        REQUIRE(metrics::agreement(a, b).kappa == Approx(metrics::agreement(b, a).kappa).margin(1e-12));
    }
}

TEST_CASE("agreement statistics are order free", "[metrics][agreement][property]") {
    Rng rng(13);
    auto a = random_hyp(150, rng);
    auto b = random_hyp(150, rng);
    auto base = metrics::agreement(a, b);
    // permute epochs identically in both
    std::vector<std::size_t> perm(150);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    metrics::Hypnogram a2 = a, b2 = b;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        a2.stages[i] = a.stages[perm[i]];
        b2.stages[i] = b.stages[perm[i]];
    }
    auto shuffled = metrics::agreement(a2, b2);
    REQUIRE(shuffled.accuracy == base.accuracy);
    REQUIRE(shuffled.kappa == Approx(base.kappa).margin(1e-12));
    for (int c = 0; c < 4; ++c)
        REQUIRE(shuffled.f1[static_cast<std::size_t>(c)] ==
                Approx(base.f1[static_cast<std::size_t>(c)]).margin(1e-12));
}

TEST_CASE("agreement validates alignment", "[metrics][agreement]") {
    Rng rng(15);
    auto a = random_hyp(100, rng);
    auto b = random_hyp(90, rng);
    REQUIRE_THROWS_AS(metrics::agreement(a, b), AlignmentError);
}

TEST_CASE("cohort_bias identities", "[metrics][bias]") {
    Rng rng(17);
    std::vector<metrics::SleepSummary> ref;
    for (int i = 0; i < 8; ++i) ref.push_back(metrics::sleep_parameters(random_hyp(200, rng)));

    SECTION("identical cohorts have zero bias and undefined r on constants") {
        auto bias = metrics::cohort_bias(ref, ref);
        REQUIRE(bias.tst.mean == 0.0);
        REQUIRE(bias.tst.sd == 0.0);
        REQUIRE(bias.se.mean == 0.0);
    }
    SECTION("constant offset is recovered exactly") {
        auto shifted = ref;
        for (auto& s : shifted) s.total_sleep_min += 5.0;
        auto bias = metrics::cohort_bias(shifted, ref);
        REQUIRE(bias.tst.mean == Approx(5.0).margin(1e-12));
        REQUIRE(bias.tst.sd == Approx(0.0).margin(1e-12));
    }
    SECTION("matches the textbook formulas on random cohorts") {
        auto pred = ref;
        for (auto& s : pred) {
            s.total_sleep_min += rng.normal(0, 10);
            s.sleep_efficiency_pct += rng.normal(0, 3);
            s.sleep_onset_latency_min += rng.normal(0, 4);
        }
        auto bias = metrics::cohort_bias(pred, ref);
        std::vector<double> d;
        for (std::size_t i = 0; i < ref.size(); ++i)
            d.push_back(pred[i].total_sleep_min - ref[i].total_sleep_min);
        REQUIRE(bias.tst.mean == Approx(mean_of(d)).margin(1e-9));
        REQUIRE(bias.tst.sd == Approx(sample_stddev_of(d)).margin(1e-9));
        // Pearson r oracle for SE
        std::vector<double> x, y;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            x.push_back(pred[i].sleep_efficiency_pct);
            y.push_back(ref[i].sleep_efficiency_pct);
        }
        double mx = mean_of(x), my = mean_of(y), num = 0, dx = 0, dy = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            num += (x[i] - mx) * (y[i] - my);
            dx += (x[i] - mx) * (x[i] - mx);
            dy += (y[i] - my) * (y[i] - my);
        }
        REQUIRE(bias.pearson_se.has_value());
        REQUIRE(*bias.pearson_se == Approx(num / std::sqrt(dx * dy)).margin(1e-9));
    }
    SECTION("fewer than two pairs is an error") {
        std::vector<metrics::SleepSummary> one = {ref[0]};
        REQUIRE_THROWS_AS(metrics::cohort_bias(one, one), StatisticsError);
    }
}

TEST_CASE("hypnogram validation", "[metrics]") {
    metrics::Hypnogram h;
    h.stages = std::vector<Stage>(10, Stage::Light);
    h.lights_off = 5;
    h.lights_on = 5;
    REQUIRE_THROWS_AS(h.validate(), BoundsError);
    h.lights_on = 11;
    REQUIRE_THROWS_AS(h.validate(), BoundsError);
}
