#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <vector>

#include "somnoradar/channels.hpp"
#include "test_support.hpp"

using namespace somnoradar;
using Catch::Approx;

namespace {

channels::TriaxialSeries triaxial(std::vector<double> x, std::vector<double> y,
                                  std::vector<double> z, double rate) {
    channels::TriaxialSeries s;
    s.acc_x = std::move(x);
    s.acc_y = std::move(y);
    s.acc_z = std::move(z);
    s.rate = rate;
    return s;
}

}  // namespace

TEST_CASE("imu_magnitude pointwise arithmetic", "[channels][imu]") {
    auto s = triaxial({0.0, 1.0, 3.0}, {0.0, 0.0, 4.0}, {0.0, 0.0, 0.0}, 25.0);
    auto mag = channels::imu_magnitude(s);
    REQUIRE(mag.values[0] == 0.0);
    REQUIRE(mag.values[1] == 1.0);
    REQUIRE(mag.values[2] == 5.0);
    REQUIRE(mag.rate == 25.0);
}

TEST_CASE("imu_magnitude is rotation invariant", "[channels][imu][property]") {
    Rng rng(77);
    const std::size_t n = 200;
    std::vector<double> x(n), y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        y[i] = rng.normal();
        z[i] = rng.normal();
    }
    auto base = channels::imu_magnitude(triaxial(x, y, z, 25.0));
    for (int trial = 0; trial < 10; ++trial) {
        // random rotation via Rodrigues' formula
        double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
        double norm = std::sqrt(ax * ax + ay * ay + az * az);
        ax /= norm;
        ay /= norm;
        az /= norm;
        double theta = rng.uniform(0.0, 2.0 * M_PI);
        double c = std::cos(theta), s = std::sin(theta), t = 1.0 - c;
        std::vector<double> rx(n), ry(n), rz(n);
        for (std::size_t i = 0; i < n; ++i) {
            rx[i] = (t * ax * ax + c) * x[i] + (t * ax * ay - s * az) * y[i] +
                    (t * ax * az + s * ay) * z[i];
            ry[i] = (t * ax * ay + s * az) * x[i] + (t * ay * ay + c) * y[i] +
                    (t * ay * az - s * ax) * z[i];
            rz[i] = (t * ax * az - s * ay) * x[i] + (t * ay * az + s * ax) * y[i] +
                    (t * az * az + c) * z[i];
        }
        auto rotated = channels::imu_magnitude(triaxial(rx, ry, rz, 25.0));
        for (std::size_t i = 0; i < n; ++i)
            REQUIRE(rotated.values[i] == Approx(base.values[i]).margin(1e-9));
    }
}

TEST_CASE("activity_from_imu zero input gives zero output", "[channels][activity]") {
    Waveform mag(std::vector<double>(500, 0.0), 25.0, Channel::Activity, Origin::PsgImu);
    auto act = channels::activity_from_imu(mag);
    REQUIRE(act.rate == 10.0);
    for (double v : act.values) {
        REQUIRE(v >= 0.0);
        REQUIRE(v < 1e-12);
    }
}

TEST_CASE("activity_from_imu matches the sine mean-absolute-deviation", "[channels][activity]") {
    // 1 Hz unit sine at 25 Hz: each 1-s window holds one full period, so
    // ACT = mean |sin| = 2/pi
    auto mag = oracle::make_waveform(oracle::sine(1.0, 25.0, 60.0), 25.0);
    mag.origin = Origin::PsgImu;
    auto act = channels::activity_from_imu(mag);
    std::size_t lo = act.values.size() / 4, hi = 3 * act.values.size() / 4;
    for (std::size_t i = lo; i < hi; ++i)
        REQUIRE(act.values[i] == Approx(2.0 / M_PI).epsilon(0.05));
}

TEST_CASE("activity_from_imu confines a burst", "[channels][activity]") {
    const double rate = 25.0;
    std::vector<double> v(static_cast<std::size_t>(rate * 30.0), 0.0);
    // 0.2 s burst at t = 15 s
    auto b0 = static_cast<std::size_t>(15.0 * rate);
    Rng rng(5);
    for (std::size_t i = b0; i < b0 + 5; ++i) v[i] = rng.normal(0.0, 1.0);
    auto act = channels::activity_from_imu(oracle::make_waveform(v, rate));
    double peak = *std::max_element(act.values.begin(), act.values.end());
    REQUIRE(peak > 0.0);
    for (std::size_t k = 0; k < act.values.size(); ++k) {
        double t = static_cast<double>(k) / 10.0;  // window start in seconds
        // 3 s slack for the zero-phase band-pass ringing around the burst
        bool overlaps_burst = t < 15.2 + 3.0 && t + 1.0 > 15.0 - 3.0;
        if (!overlaps_burst) REQUIRE(act.values[k] < 0.05 * peak);
    }
}

TEST_CASE("activity_from_imu input checks", "[channels][activity]") {
    Waveform slow(std::vector<double>(100, 0.0), 4.0, Channel::Activity, Origin::PsgImu);
    REQUIRE_THROWS_AS(channels::activity_from_imu(slow), ParameterError);
    Waveform brief(std::vector<double>(10, 0.0), 25.0, Channel::Activity, Origin::PsgImu);
    REQUIRE_THROWS_AS(channels::activity_from_imu(brief), InsufficientDataError);
}

TEST_CASE("radar_energy sums window magnitudes", "[channels][energy]") {
    RadarCube cube(50, 8, 20.0, 0.05);
    dsp::RangeWindow win;
    win.center_bin = 4;
    win.half_width_bins = 2;
    win.lo_bin = 2;
    win.hi_bin = 6;

    SECTION("zero cube") {
        auto e = channels::radar_energy(cube, win);
        for (double v : e.values) REQUIRE(v == 0.0);
    }
    SECTION("single unit bin") {
        for (std::size_t t = 0; t < cube.frames; ++t) cube.at(t, 4) = {1.0, 0.0};
        auto e = channels::radar_energy(cube, win);
        for (double v : e.values) REQUIRE(v == Approx(1.0));
    }
    SECTION("random cube matches the brute-force double loop") {
        Rng rng(3);
        for (auto& s : cube.samples) s = {rng.normal(), rng.normal()};
        auto e = channels::radar_energy(cube, win);
        for (std::size_t t = 0; t < cube.frames; ++t) {
            double acc = 0.0;
            for (std::size_t b = win.lo_bin; b <= win.hi_bin; ++b) {
                acc += cube.at(t, b).real() * cube.at(t, b).real() +
                       cube.at(t, b).imag() * cube.at(t, b).imag();
            }
            REQUIRE(e.values[t] == acc);
        }
    }
    SECTION("window outside the cube") {
        win.hi_bin = 20;
        REQUIRE_THROWS_AS(channels::radar_energy(cube, win), BoundsError);
    }
}

TEST_CASE("motion_mask constant energy is all quiet", "[channels][motion]") {
    Waveform e(std::vector<double>(400, 3.0), 20.0, Channel::Energy, Origin::Radar);
    auto res = channels::motion_mask(e);
    for (bool m : res.mask) REQUIRE_FALSE(m);
    for (double v : res.activity.values) REQUIRE(v == 0.0);
}

TEST_CASE("motion_mask flags an inserted spike", "[channels][motion]") {
    Rng rng(8);
    const double rate = 20.0;
    std::vector<double> e(static_cast<std::size_t>(rate * 120.0));
    for (auto& v : e) v = rng.normal(10.0, 1.0);
    auto spike = static_cast<std::size_t>(60.0 * rate);
    e[spike] += 20.0;
    auto res = channels::motion_mask(oracle::make_waveform(e, rate));

    // oracle: brute-force centered-window variance + median/MAD threshold
    const std::size_t w = 20, half = w / 2, n = e.size();
    std::vector<double> var(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lo = (i >= half) ? i - half : 0;
        std::size_t hi = std::min(n, lo + w);
        lo = (hi >= w) ? hi - w : 0;
        double m = 0.0;
        for (std::size_t j = lo; j < hi; ++j) m += e[j];
        m /= static_cast<double>(hi - lo);
        double v = 0.0;
        for (std::size_t j = lo; j < hi; ++j) v += (e[j] - m) * (e[j] - m);
        var[i] = v / static_cast<double>(hi - lo);
    }
    double med = median_of(var);
    double mad = mad_of(var);
    for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(res.variance.values[i] == Approx(var[i]).margin(1e-6));
        REQUIRE(res.mask[i] == (var[i] > med + 6.0 * mad));
    }
    // spike is caught, spillover at most one second each side
    REQUIRE(res.mask[spike]);
    for (std::size_t i = 0; i < n; ++i) {
        if (res.mask[i])
            REQUIRE(std::abs(static_cast<double>(i) - static_cast<double>(spike)) <= rate);
    }
}

TEST_CASE("motion_mask lambda zero flags about half", "[channels][motion]") {
    Rng rng(9);
    std::vector<double> e(4000);
    for (auto& v : e) v = rng.normal(5.0, 1.0);
    auto res = channels::motion_mask(oracle::make_waveform(e, 20.0), 1.0, 0.0);
    // oracle count: strictly above the median of the variance series
    std::size_t expect = 0;
    double med = median_of(res.variance.values);
    for (double v : res.variance.values)
        if (v > med) ++expect;
    std::size_t got = 0;
    for (bool m : res.mask)
        if (m) ++got;
    REQUIRE(got == expect);
    REQUIRE(static_cast<double>(got) / static_cast<double>(e.size()) == Approx(0.5).margin(0.05));
}

TEST_CASE("motion_mask flagged fraction invariant to positive scaling", "[channels][motion][property]") {
    Rng rng(10);
    std::vector<double> e(3000);
    for (auto& v : e) v = std::abs(rng.normal(4.0, 1.5));
    auto base = channels::motion_mask(oracle::make_waveform(e, 20.0));
    for (double scale : {0.25, 7.0, 1234.5}) {
        std::vector<double> scaled(e.size());
        for (std::size_t i = 0; i < e.size(); ++i) scaled[i] = scale * e[i];
        auto res = channels::motion_mask(oracle::make_waveform(scaled, 20.0));
        REQUIRE(res.mask == base.mask);
    }
}

TEST_CASE("motion_mask short record errors", "[channels][motion]") {
    Waveform e(std::vector<double>(5, 1.0), 20.0, Channel::Energy, Origin::Radar);
    REQUIRE_THROWS_AS(channels::motion_mask(e), InsufficientDataError);
}

TEST_CASE("phase_trajectories linear phase ramp", "[channels][phase]") {
    RadarCube cube(500, 3, 20.0, 0.05);
    for (std::size_t t = 0; t < cube.frames; ++t)
        for (std::size_t b = 0; b < cube.bins; ++b)
            cube.at(t, b) = std::polar(1.0, 0.2 * static_cast<double>(t));
    dsp::RangeWindow win;
    win.lo_bin = 0;
    win.hi_bin = 2;
    auto bundle = channels::phase_trajectories(cube, win);
    REQUIRE(bundle.num_channels() == 3);
    for (std::size_t t = 0; t < cube.frames; ++t) {
        // ramp crosses +/- pi repeatedly; unwrapped output must stay linear
        REQUIRE(bundle.phases[0][t] == Approx(0.2 * static_cast<double>(t)).margin(1e-9));
    }
    for (std::size_t t = 1; t < cube.frames; ++t)
        REQUIRE(std::abs(bundle.phases[0][t] - bundle.phases[0][t - 1]) <= M_PI);
}

TEST_CASE("phase_trajectories recovers a displacement spectrum", "[channels][phase]") {
    Rng rng(12);
    RadarCube cube(2400, 2, 20.0, 0.05);  // 120 s
    for (std::size_t t = 0; t < cube.frames; ++t) {
        double phi = 1.2 * std::sin(2.0 * M_PI * 0.25 * static_cast<double>(t) / 20.0);
        cube.at(t, 0) = std::polar(1.0, phi) + 0.02 * std::complex<double>(rng.normal(), rng.normal());
        cube.at(t, 1) = cube.at(t, 0);
    }
    dsp::RangeWindow win;
    win.lo_bin = 0;
    win.hi_bin = 1;
    auto bundle = channels::phase_trajectories(cube, win);
    std::vector<double> centered = bundle.phases[0];
    double m = mean_of(centered);
    for (auto& v : centered) v -= m;
    double in_band = oracle::band_power(centered, 20.0, 0.2, 0.3);
    double total = oracle::total_power(centered);
    REQUIRE(in_band / total > 0.9);
}

TEST_CASE("phase_trajectories drops dead bins", "[channels][phase]") {
    RadarCube cube(200, 2, 20.0, 0.05);
    for (std::size_t t = 0; t < cube.frames; ++t) cube.at(t, 0) = std::polar(1.0, 0.1 * t);
    // bin 1 stays below the magnitude floor for > 1 s
    dsp::RangeWindow win;
    win.lo_bin = 0;
    win.hi_bin = 1;
    auto bundle = channels::phase_trajectories(cube, win);
    REQUIRE(bundle.num_channels() == 1);
    REQUIRE(bundle.bin_indices[0] == 0);

    RadarCube dead(200, 2, 20.0, 0.05);
    dsp::RangeWindow win2;
    win2.lo_bin = 0;
    win2.hi_bin = 1;
    REQUIRE_THROWS_AS(channels::phase_trajectories(dead, win2), NoSignalError);
}

TEST_CASE("instantaneous_frequency on a steady sine", "[channels][instfreq]") {
    auto w = oracle::make_waveform(oracle::sine(0.25, 10.0, 120.0), 10.0);
    auto res = channels::instantaneous_frequency(w);
    for (std::size_t i = 0; i < res.freq.values.size(); ++i) {
        if (!res.valid[i]) continue;
        REQUIRE(res.freq.values[i] == Approx(0.25).margin(0.01));
    }
    std::size_t valid = 0;
    for (bool v : res.valid) valid += v ? 1 : 0;
    REQUIRE(valid > res.valid.size() * 9 / 10);
}

TEST_CASE("instantaneous_frequency tracks a chirp", "[channels][instfreq]") {
    const double rate = 10.0, seconds = 300.0;
    auto n = static_cast<std::size_t>(rate * seconds);
    std::vector<double> x(n);
    double phase = 0.0;
    std::vector<double> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        double f = 0.15 + 0.2 * static_cast<double>(i) / static_cast<double>(n);
        truth[i] = f;
        phase += 2.0 * M_PI * f / rate;
        x[i] = std::sin(phase);
    }
    auto res = channels::instantaneous_frequency(oracle::make_waveform(x, rate));
    double prev = 0.0;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(30.0 * rate)) {
        if (!res.valid[i]) continue;
        REQUIRE(res.freq.values[i] == Approx(truth[i]).margin(0.02));
        REQUIRE(res.freq.values[i] >= prev - 0.005);  // monotone within jitter
        prev = res.freq.values[i];
    }
}

TEST_CASE("instantaneous_frequency zero signal is all missing", "[channels][instfreq]") {
    auto res = channels::instantaneous_frequency(
        oracle::make_waveform(std::vector<double>(300, 0.0), 10.0));
    for (bool v : res.valid) REQUIRE_FALSE(v);
}

TEST_CASE("select_respiratory_imf picks the in-band mode", "[channels][select]") {
    const double rate = 10.0;
    memd::ImfSet set;
    set.rate = rate;
    set.imfs.push_back({oracle::sine(2.0, rate, 60.0)});  // out of band
    set.imfs.push_back({oracle::sine(0.3, rate, 60.0)});  // in band
    set.residual = {std::vector<double>(600, 0.0)};
    auto choice = channels::select_respiratory_imf(set);
    REQUIRE(choice.index == 1);
    REQUIRE_FALSE(choice.low_quality);
}

TEST_CASE("select_respiratory_imf prefers the cleaner in-band mode", "[channels][select]") {
    const double rate = 10.0;
    Rng rng(19);
    auto clean = oracle::sine(0.25, rate, 120.0);
    auto noisy = oracle::sine(0.25, rate, 120.0);
    for (auto& v : noisy) v += 0.8 * rng.normal();
    memd::ImfSet set;
    set.rate = rate;
    set.imfs.push_back({noisy});
    set.imfs.push_back({clean});
    set.residual = {std::vector<double>(clean.size(), 0.0)};
    auto choice = channels::select_respiratory_imf(set);
    REQUIRE(choice.index == 1);
}

TEST_CASE("select_respiratory_imf falls back when nothing is in band", "[channels][select]") {
    const double rate = 10.0;
    memd::ImfSet set;
    set.rate = rate;
    set.imfs.push_back({oracle::sine(2.0, rate, 60.0)});
    set.residual = {std::vector<double>(600, 0.0)};
    auto choice = channels::select_respiratory_imf(set);
    REQUIRE(choice.index == 0);
    REQUIRE(choice.low_quality);
}

TEST_CASE("reconstruct_respiration equals the filtered mode for identical channels",
          "[channels][reconstruct]") {
    const double rate = 10.0;
    auto imf = oracle::sine(0.3, rate, 120.0);
    memd::ImfSet set;
    set.rate = rate;
    set.imfs.push_back({imf, imf, imf});
    set.residual = memd::MultiSeries(3, std::vector<double>(imf.size(), 0.0));
    auto out = channels::reconstruct_respiration(set, 0);
    auto expect = dsp::band_pass(
        Waveform(imf, rate, Channel::Respiration, Origin::Radar), 0.1, 0.6);
    REQUIRE(out.values.size() == expect.values.size());
    for (std::size_t i = 0; i < out.values.size(); ++i)
        REQUIRE(out.values[i] == Approx(expect.values[i]).margin(1e-9));
}

TEST_CASE("reconstruct_respiration gains sqrt(K) over one channel", "[channels][reconstruct]") {
    const double rate = 10.0;
    const std::size_t k = 8;
    Rng rng(23);
    auto signal = oracle::sine(0.25, rate, 300.0);
    memd::ImfSet multi, single;
    multi.rate = single.rate = rate;
    memd::MultiSeries chans;
    for (std::size_t c = 0; c < k; ++c) {
        auto noisy = signal;
        for (auto& v : noisy) v += 0.5 * rng.normal();
        chans.push_back(noisy);
    }
    multi.imfs.push_back(chans);
    multi.residual = memd::MultiSeries(k, std::vector<double>(signal.size(), 0.0));
    single.imfs.push_back({chans[0]});
    single.residual = {std::vector<double>(signal.size(), 0.0)};

    auto clean = dsp::band_pass(Waveform(signal, rate, Channel::Respiration, Origin::Radar),
                                0.1, 0.6);
    auto multi_out = channels::reconstruct_respiration(multi, 0);
    auto single_out = channels::reconstruct_respiration(single, 0);
    std::vector<double> noise_multi(clean.values.size()), noise_single(clean.values.size());
    for (std::size_t i = 0; i < clean.values.size(); ++i) {
        noise_multi[i] = multi_out.values[i] - clean.values[i];
        noise_single[i] = single_out.values[i] - clean.values[i];
    }
    double gain = oracle::rms(noise_single) / oracle::rms(noise_multi);
    REQUIRE(gain == Approx(std::sqrt(static_cast<double>(k))).epsilon(0.20));
    REQUIRE(oracle::rms(noise_multi) < oracle::rms(noise_single));
}

TEST_CASE("reconstruct_respiration output is band-limited", "[channels][reconstruct][property]") {
    Rng rng(29);
    const double rate = 10.0;
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> chan(1800);
        double v = 0.0;
        for (auto& s : chan) {
            v = 0.95 * v + rng.normal();
            s = v;
        }
        memd::ImfSet set;
        set.rate = rate;
        set.imfs.push_back({chan});
        set.residual = {std::vector<double>(chan.size(), 0.0)};
        auto out = channels::reconstruct_respiration(set, 0);
        double in_band = oracle::band_power(out.values, rate, 0.1, 0.6);
        double total = oracle::total_power(out.values);
        if (total > 1e-12) REQUIRE(in_band / total >= 0.9);
    }
}

TEST_CASE("decimate_bundle lowers the rate", "[channels][phase]") {
    channels::PhaseBundle bundle;
    bundle.rate = 20.0;
    bundle.bin_indices = {4};
    bundle.phases.push_back(oracle::sine(0.25, 20.0, 60.0));
    auto low = channels::decimate_bundle(bundle, 10.0);
    REQUIRE(low.rate == 10.0);
    REQUIRE(low.phases[0].size() == 600);
    REQUIRE(oracle::zero_cross_freq(low.phases[0], 10.0) == Approx(0.25).epsilon(0.02));
}
