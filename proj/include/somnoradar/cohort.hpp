#pragma once

// Writes a synthetic cohort to disk: per night the raw domain assets (belt +
// IMU waveforms or a radar cube, or both for dual-position target cohorts),
// the ground-truth labels, and a manifest tying them together.

#include <filesystem>
#include <string>

#include "somnoradar/manifest.hpp"
#include "somnoradar/radar_cube.hpp"
#include "somnoradar/synth.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::io {

struct CohortRequest {
    std::string cohort_id = "cohort";
    std::string domain = "source";  // "source" (belt+IMU) or "target" (radar)
    synth::CohortSpec spec;
};

inline void to_json(nlohmann::json& j, const CohortRequest& r) {
    j = {{"cohort_id", r.cohort_id}, {"domain", r.domain}, {"spec", r.spec}};
}

inline void from_json(const nlohmann::json& j, CohortRequest& r) {
    j.at("cohort_id").get_to(r.cohort_id);
    j.at("domain").get_to(r.domain);
    j.at("spec").get_to(r.spec);
    if (r.domain != "source" && r.domain != "target")
        throw ConfigError("cohort request: domain must be source or target");
}

inline Manifest write_synthetic_cohort(const CohortRequest& request, const std::string& out_dir) {
    request.spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Manifest manifest;
    manifest.cohort_id = request.cohort_id;
    Rng seeds(request.spec.seed);
    for (int s = 0; s < request.spec.subjects; ++s) {
        const std::uint64_t night_seed = seeds.fork(static_cast<std::uint64_t>(s) + 1).state();
        auto truth = synth::make_truth(request.spec, night_seed);
        const std::string subject = request.cohort_id + "_s" + std::to_string(s);
        const std::string night = subject + "_n0";
        const std::string base = out_dir + "/" + night;

        NightLabels labels;
        labels.night_id = night;
        labels.subject_id = subject;
        labels.stages = truth.hypnogram;
        labels.lights_off = 0;
        labels.lights_on = truth.hypnogram.size();
        for (std::size_t e = 0; e < truth.hypnogram.size(); ++e)
            labels.epoch_rate_bpm.push_back(truth.epoch_mean_rate_bpm(e));
        write_night_labels(labels, base + ".labels.json");

        auto make_entry = [&](const std::string& position) {
            NightEntry entry;
            entry.night_id = position.empty() ? night : night + "_" + position;
            entry.subject_id = subject;
            entry.domain = request.domain;
            entry.position = position;
            entry.labels_path = base + ".labels.json";
            return entry;
        };

        if (request.domain == "source") {
            auto psg = synth::synth_psg_night(truth, request.spec, night_seed);
            auto entry = make_entry("");
            entry.belt_path = base + ".belt.csv";
            write_waveform_csv(psg.belt, entry.belt_path);
            auto axis = [&](const std::vector<double>& v, const std::string& suffix,
                            std::string* path) {
                Waveform w(v, psg.imu.rate, Channel::Activity, Origin::PsgImu);
                *path = base + ".imu_" + suffix + ".csv";
                write_waveform_csv(w, *path);
            };
            axis(psg.imu.acc_x, "x", &entry.imu_x_path);
            axis(psg.imu.acc_y, "y", &entry.imu_y_path);
            axis(psg.imu.acc_z, "z", &entry.imu_z_path);
            manifest.nights.push_back(std::move(entry));
        } else {
            auto write_position = [&](const std::string& position,
                                      const synth::RadarSceneOptions& opts,
                                      std::uint64_t cube_seed) {
                auto cube = synth::synth_radar_night(truth, request.spec, cube_seed, opts);
                auto entry = make_entry(position);
                entry.cube_path = base + "." + position + ".rcub";
                write_radar_cube(cube, entry.cube_path);
                manifest.nights.push_back(std::move(entry));
            };
            synth::RadarSceneOptions bedside;
            bedside.snr_db = request.spec.radar_snr_db;
            bedside.multipath_level = request.spec.multipath_level;
            write_position("bedside", bedside, night_seed);
            if (request.spec.dual_position) {
                // the overhead unit sees the subject a little less cleanly
                synth::RadarSceneOptions overhead = bedside;
                overhead.snr_db = request.spec.radar_snr_db - 2.0;
                overhead.multipath_level = request.spec.multipath_level * 1.5;
                write_position("overhead", overhead, night_seed ^ 0x6f766572ULL);
            }
        }
    }
    write_manifest(manifest, out_dir + "/manifest.json");
    return manifest;
}

}  // namespace somnoradar::io
