#pragma once

// Waveform: uniformly sampled 1-D real series with rate/channel/origin
// metadata. On-disk form is a two-column CSV plus a JSON sidecar.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"

namespace somnoradar {

enum class Channel : int { Respiration = 0, Activity = 1, Energy = 2, Phase = 3 };
enum class Origin : int { PsgBelt = 0, PsgImu = 1, Radar = 2 };

inline const char* channel_name(Channel c) {
    switch (c) {
        case Channel::Respiration: return "respiration";
        case Channel::Activity: return "activity";
        case Channel::Energy: return "energy";
        case Channel::Phase: return "phase";
    }
    return "?";
}

inline Channel channel_from_name(const std::string& s) {
    if (s == "respiration") return Channel::Respiration;
    if (s == "activity") return Channel::Activity;
    if (s == "energy") return Channel::Energy;
    if (s == "phase") return Channel::Phase;
    throw FormatError("unknown channel: " + s);
}

inline const char* origin_name(Origin o) {
    switch (o) {
        case Origin::PsgBelt: return "psg_belt";
        case Origin::PsgImu: return "psg_imu";
        case Origin::Radar: return "radar";
    }
    return "?";
}

inline Origin origin_from_name(const std::string& s) {
    if (s == "psg_belt") return Origin::PsgBelt;
    if (s == "psg_imu") return Origin::PsgImu;
    if (s == "radar") return Origin::Radar;
    throw FormatError("unknown origin: " + s);
}

struct Waveform {
    std::vector<double> values;
    double rate = 0.0;  // Hz
    Channel channel = Channel::Respiration;
    Origin origin = Origin::Radar;

    Waveform() = default;
    Waveform(std::vector<double> v, double r, Channel c, Origin o)
        : values(std::move(v)), rate(r), channel(c), origin(o) {
        validate();
    }

    std::size_t size() const { return values.size(); }
    double duration_seconds() const { return static_cast<double>(values.size()) / rate; }

    void validate() const {
        if (!(rate > 0.0)) throw ParameterError("waveform: rate must be > 0");
        if (!all_finite(values)) throw ParameterError("waveform: non-finite sample");
    }
};

// ---------------------------------------------------------------------------
// CSV + sidecar persistence
// ---------------------------------------------------------------------------

inline void write_waveform_csv(const Waveform& w, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw FormatError("cannot open for write: " + path);
    std::fputs("t_seconds,value\n", f);
    for (std::size_t i = 0; i < w.values.size(); ++i)
        std::fprintf(f, "%.9f,%.17g\n", static_cast<double>(i) / w.rate, w.values[i]);
    std::fclose(f);

    nlohmann::json meta;
    meta["rate"] = w.rate;
    meta["channel"] = channel_name(w.channel);
    meta["origin"] = origin_name(w.origin);
    std::ofstream ms(path + ".meta.json");
    if (!ms) throw FormatError("cannot open for write: " + path + ".meta.json");
    ms << meta.dump(2) << "\n";
}

inline Waveform read_waveform_csv(const std::string& path) {
    std::ifstream ms(path + ".meta.json");
    if (!ms) throw FormatError("missing waveform sidecar: " + path + ".meta.json");
    nlohmann::json meta = nlohmann::json::parse(ms);

    std::ifstream f(path);
    if (!f) throw FormatError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("t_seconds,value", 0) != 0)
        throw FormatError("bad waveform header in " + path);
    std::vector<double> values;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError("bad waveform row in " + path);
        values.push_back(std::stod(line.substr(comma + 1)));
    }
    return Waveform(std::move(values), meta.at("rate").get<double>(),
                    channel_from_name(meta.at("channel").get<std::string>()),
                    origin_from_name(meta.at("origin").get<std::string>()));
}

}  // namespace somnoradar
