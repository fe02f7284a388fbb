#pragma once

// Dataset manifests, night label records and run records: the file-level
// glue between the CLI stages.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"
#include "somnoradar/metrics.hpp"
#include "somnoradar/train.hpp"
#include "somnoradar/waveform.hpp"

namespace somnoradar::io {

struct NightEntry {
    std::string night_id;
    std::string subject_id;
    std::string domain;    // "source" / "target"
    std::string position;  // "bedside" / "overhead" / "wall" / ""
    // raw assets
    std::string cube_path;  // target nights
    std::string belt_path;  // source nights
    std::string imu_x_path, imu_y_path, imu_z_path;
    std::string labels_path;
    // preprocessed channels
    std::string respiration_path;
    std::string activity_path;
    std::string status;  // "" or "ok" / error text from preprocessing
};

struct Manifest {
    std::string cohort_id;
    std::vector<NightEntry> nights;
};

inline void to_json(nlohmann::json& j, const NightEntry& e) {
    j = {{"night_id", e.night_id},     {"subject_id", e.subject_id},
         {"domain", e.domain},         {"position", e.position},
         {"cube", e.cube_path},        {"belt", e.belt_path},
         {"imu_x", e.imu_x_path},      {"imu_y", e.imu_y_path},
         {"imu_z", e.imu_z_path},      {"labels", e.labels_path},
         {"respiration", e.respiration_path}, {"activity", e.activity_path},
         {"status", e.status}};
}

inline void from_json(const nlohmann::json& j, NightEntry& e) {
    j.at("night_id").get_to(e.night_id);
    j.at("subject_id").get_to(e.subject_id);
    j.at("domain").get_to(e.domain);
    j.at("position").get_to(e.position);
    auto get = [&](const char* key, std::string* out) {
        if (j.contains(key) && !j.at(key).is_null()) j.at(key).get_to(*out);
    };
    get("cube", &e.cube_path);
    get("belt", &e.belt_path);
    get("imu_x", &e.imu_x_path);
    get("imu_y", &e.imu_y_path);
    get("imu_z", &e.imu_z_path);
    get("labels", &e.labels_path);
    get("respiration", &e.respiration_path);
    get("activity", &e.activity_path);
    get("status", &e.status);
    if (e.domain != "source" && e.domain != "target")
        throw FormatError("manifest: bad domain tag '" + e.domain + "'");
    if (!e.position.empty() && e.position != "bedside" && e.position != "overhead" &&
        e.position != "wall")
        throw FormatError("manifest: bad position tag '" + e.position + "'");
}

inline void to_json(nlohmann::json& j, const Manifest& m) {
    j = {{"cohort_id", m.cohort_id}, {"nights", m.nights}};
}

inline void from_json(const nlohmann::json& j, Manifest& m) {
    j.at("cohort_id").get_to(m.cohort_id);
    j.at("nights").get_to(m.nights);
}

inline void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot open for write: " + path);
    nlohmann::json j = m;
    f << j.dump(2) << "\n";
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open: " + path);
    return nlohmann::json::parse(f).get<Manifest>();
}

// ---------------------------------------------------------------------------
// Night labels
// ---------------------------------------------------------------------------

struct NightLabels {
    std::string night_id;
    std::string subject_id;
    std::vector<Stage> stages;
    std::size_t lights_off = 0;
    std::size_t lights_on = 0;
    std::vector<double> epoch_rate_bpm;  // optional ground-truth rates
};

inline void write_night_labels(const NightLabels& labels, const std::string& path) {
    nlohmann::json j;
    j["night_id"] = labels.night_id;
    j["subject_id"] = labels.subject_id;
    std::vector<std::string> names;
    for (Stage s : labels.stages) names.emplace_back(stage_name(s));
    j["stages"] = names;
    j["lights_off"] = labels.lights_off;
    j["lights_on"] = labels.lights_on;
    if (!labels.epoch_rate_bpm.empty()) j["epoch_rate_bpm"] = labels.epoch_rate_bpm;
    std::ofstream f(path);
    if (!f) throw FormatError("cannot open for write: " + path);
    f << j.dump(2) << "\n";
}

inline NightLabels read_night_labels(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open: " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    NightLabels labels;
    j.at("night_id").get_to(labels.night_id);
    j.at("subject_id").get_to(labels.subject_id);
    for (const auto& name : j.at("stages"))
        labels.stages.push_back(stage_from_name(name.get<std::string>()));
    j.at("lights_off").get_to(labels.lights_off);
    j.at("lights_on").get_to(labels.lights_on);
    if (j.contains("epoch_rate_bpm")) j.at("epoch_rate_bpm").get_to(labels.epoch_rate_bpm);
    return labels;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Loads preprocessed nights (skipping entries without channels); `domain`
/// is 0 for source manifests, 1 for target.
inline train::Dataset load_dataset(const Manifest& manifest, int domain) {
    train::Dataset out;
    for (const auto& entry : manifest.nights) {
        if (entry.respiration_path.empty() || entry.activity_path.empty()) continue;
        if (!entry.status.empty() && entry.status != "ok") continue;
        train::NightRecord rec;
        rec.night_id = entry.night_id;
        rec.subject_id = entry.subject_id;
        rec.domain = domain;
        rec.position = entry.position;
        rec.respiration = read_waveform_csv(entry.respiration_path).values;
        rec.activity = read_waveform_csv(entry.activity_path).values;
        auto labels = read_night_labels(entry.labels_path);
        for (Stage s : labels.stages) rec.labels.push_back(static_cast<int>(s));
        std::size_t epochs = rec.epochs();
        if (epochs == 0) continue;
        rec.labels.resize(epochs);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct RunRecord {
    nlohmann::json config_snapshot;
    std::string input_checksum;
    std::string model_checksum;
    nlohmann::json metrics;
    std::string started_at;
    std::string finished_at;
};

inline void write_run_record(const RunRecord& record, const std::string& path) {
    nlohmann::json j = {{"config", record.config_snapshot},
                        {"input_checksum", record.input_checksum},
                        {"model_checksum", record.model_checksum},
                        {"metrics", record.metrics},
                        {"started_at", record.started_at},
                        {"finished_at", record.finished_at}};
    std::ofstream f(path);
    if (!f) throw FormatError("cannot open for write: " + path);
    f << j.dump(2) << "\n";
}

inline std::string file_fnv_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
        if (!f) break;
    }
    return checksum_hex(h);
}

}  // namespace somnoradar::io
