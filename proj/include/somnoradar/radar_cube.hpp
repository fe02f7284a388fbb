#pragma once

// RadarCube: complex slow-time x fast-time frame matrix. Binary layout:
// little-endian header {magic "RCUB", version u32, frames u64, bins u32,
// frame_rate f64, bin_size f64} followed by interleaved float32 (re, im)
// row-major frames.

#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "somnoradar/common.hpp"

namespace somnoradar {

struct RadarCube {
    // samples[t * bins + tau], slow time major
    std::vector<std::complex<double>> samples;
    std::size_t frames = 0;
    std::size_t bins = 0;
    double frame_rate = 0.0;      // slow-time Hz
    double range_bin_size = 0.0;  // meters
    double start_time = 0.0;      // seconds since epoch of first frame

    RadarCube() = default;
    RadarCube(std::size_t n_frames, std::size_t n_bins, double fps, double bin_m)
        : samples(n_frames * n_bins, {0.0, 0.0}),
          frames(n_frames),
          bins(n_bins),
          frame_rate(fps),
          range_bin_size(bin_m) {
        validate();
    }

    std::complex<double>& at(std::size_t t, std::size_t tau) { return samples[t * bins + tau]; }
    const std::complex<double>& at(std::size_t t, std::size_t tau) const {
        return samples[t * bins + tau];
    }

    double duration_seconds() const { return static_cast<double>(frames) / frame_rate; }

    void validate() const {
        if (!(frame_rate > 0.0)) throw ParameterError("radar cube: frame_rate must be > 0");
        if (bins < 2) throw ParameterError("radar cube: needs at least 2 fast-time bins");
        if (samples.size() != frames * bins) throw ShapeError("radar cube: ragged frame data");
    }
};

namespace detail {

template <class T>
void write_le(std::FILE* f, T v) {
    // this library targets little-endian hosts; memcpy keeps it alias-safe
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if (std::fwrite(buf, 1, sizeof(T), f) != sizeof(T)) throw FormatError("short write");
}

template <class T>
T read_le(std::FILE* f) {
    unsigned char buf[sizeof(T)];
    if (std::fread(buf, 1, sizeof(T), f) != sizeof(T)) throw FormatError("short read");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kRadarCubeVersion = 1;

inline void write_radar_cube(const RadarCube& cube, const std::string& path) {
    cube.validate();
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw FormatError("cannot open for write: " + path);
    std::fwrite("RCUB", 1, 4, f);
    detail::write_le<std::uint32_t>(f, kRadarCubeVersion);
    detail::write_le<std::uint64_t>(f, cube.frames);
    detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(cube.bins));
    detail::write_le<double>(f, cube.frame_rate);
    detail::write_le<double>(f, cube.range_bin_size);
    std::vector<float> row(cube.bins * 2);
    for (std::size_t t = 0; t < cube.frames; ++t) {
        for (std::size_t b = 0; b < cube.bins; ++b) {
            row[2 * b] = static_cast<float>(cube.at(t, b).real());
            row[2 * b + 1] = static_cast<float>(cube.at(t, b).imag());
        }
        if (std::fwrite(row.data(), sizeof(float), row.size(), f) != row.size()) {
            std::fclose(f);
            throw FormatError("short write: " + path);
        }
    }
    std::fclose(f);
}

inline RadarCube read_radar_cube(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "RCUB", 4) != 0) {
        std::fclose(f);
        throw FormatError("not a radar cube file: " + path);
    }
    try {
        auto version = detail::read_le<std::uint32_t>(f);
        if (version != kRadarCubeVersion) throw FormatError("unsupported cube version");
        auto frames = detail::read_le<std::uint64_t>(f);
        auto bins = detail::read_le<std::uint32_t>(f);
        auto fps = detail::read_le<double>(f);
        auto bin_m = detail::read_le<double>(f);
        RadarCube cube(static_cast<std::size_t>(frames), bins, fps, bin_m);
        std::vector<float> row(bins * 2ull);
        for (std::size_t t = 0; t < cube.frames; ++t) {
            if (std::fread(row.data(), sizeof(float), row.size(), f) != row.size())
                throw FormatError("truncated cube: " + path);
            for (std::size_t b = 0; b < bins; ++b)
                cube.at(t, b) = {static_cast<double>(row[2 * b]), static_cast<double>(row[2 * b + 1])};
        }
        std::fclose(f);
        return cube;
    } catch (...) {
        std::fclose(f);
        throw;
    }
}

}  // namespace somnoradar
