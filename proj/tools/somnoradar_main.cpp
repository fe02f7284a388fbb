// somnoradar: impulse-radar sleep staging toolkit.
//
// Subcommands: synth, preprocess, train, stage, evaluate. Exit codes:
// 0 success, 2 partial per-night failures, 1 fatal error.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <thread>
#include <vector>

#include "somnoradar/checkpoint.hpp"
#include "somnoradar/cohort.hpp"
#include "somnoradar/infer.hpp"
#include "somnoradar/manifest.hpp"
#include "somnoradar/metrics.hpp"
#include "somnoradar/pipeline.hpp"
#include "somnoradar/train.hpp"

namespace fs = std::filesystem;
using namespace somnoradar;

namespace {

int worker_count() {
    if (const char* env = std::getenv("SOMNORADAR_WORKERS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(hw ? hw : 2);
}

std::string now_iso8601() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

// -----------------------------------------------------------------------
// synth
// -----------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
    std::ifstream f(spec_path);
    if (!f) {
        std::cerr << "error: cannot open spec file: " << spec_path << "\n";
        return 1;
    }
    io::CohortRequest request;
    try {
        request = nlohmann::json::parse(f).get<io::CohortRequest>();
    } catch (const nlohmann::json::parse_error& e) {
        std::cerr << "error: malformed spec: " << e.what() << "\n";
        return 1;
    }
    auto manifest = io::write_synthetic_cohort(request, out_dir);
    std::cout << "wrote " << manifest.nights.size() << " night entries to " << out_dir
              << "/manifest.json\n";
    return 0;
}

// -----------------------------------------------------------------------
// preprocess
// -----------------------------------------------------------------------

int cmd_preprocess(const std::string& manifest_path, const std::string& out_dir) {
    auto manifest = io::read_manifest(manifest_path);
    fs::create_directories(out_dir);

    std::atomic<std::size_t> next{0};
    std::vector<std::string> statuses(manifest.nights.size());
    auto process_one = [&](std::size_t i) {
        auto& entry = manifest.nights[i];
        try {
            pipeline::NightChannels channels;
            if (entry.domain == "target") {
                auto cube = read_radar_cube(entry.cube_path);
                channels = pipeline::process_radar_night(cube);
            } else {
                auto belt = read_waveform_csv(entry.belt_path);
                somnoradar::channels::TriaxialSeries imu;
                auto x = read_waveform_csv(entry.imu_x_path);
                imu.acc_x = x.values;
                imu.acc_y = read_waveform_csv(entry.imu_y_path).values;
                imu.acc_z = read_waveform_csv(entry.imu_z_path).values;
                imu.rate = x.rate;
                channels = pipeline::process_psg_night(belt, imu);
            }
            const std::string base = out_dir + "/" + entry.night_id;
            write_waveform_csv(channels.respiration, base + ".resp.csv");
            write_waveform_csv(channels.activity, base + ".act.csv");
            entry.respiration_path = base + ".resp.csv";
            entry.activity_path = base + ".act.csv";
            statuses[i] = channels.low_quality ? "ok (low-quality flag)" : "ok";
        } catch (const std::exception& e) {
            statuses[i] = std::string("failed: ") + e.what();
        }
    };

    const int workers = std::min<int>(worker_count(), static_cast<int>(manifest.nights.size()));
    std::vector<std::thread> pool;
    for (int w = 0; w < std::max(1, workers); ++w) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= manifest.nights.size()) return;
                process_one(i);
            }
        });
    }
    for (auto& t : pool) t.join();

    std::size_t failed = 0;
    for (std::size_t i = 0; i < manifest.nights.size(); ++i) {
        manifest.nights[i].status = statuses[i];
        if (statuses[i].rfind("ok", 0) != 0) {
            ++failed;
            std::cerr << "night " << manifest.nights[i].night_id << ": " << statuses[i] << "\n";
        }
    }
    io::write_manifest(manifest, out_dir + "/channels_manifest.json");
    std::cout << "preprocessed " << (manifest.nights.size() - failed) << "/"
              << manifest.nights.size() << " nights -> " << out_dir << "/channels_manifest.json\n";
    if (failed == manifest.nights.size() && !manifest.nights.empty()) return 1;
    return failed ? 2 : 0;
}

// -----------------------------------------------------------------------
// train
// -----------------------------------------------------------------------

int cmd_train(const std::string& source_manifest, const std::string& target_manifest,
              const std::string& config_path, const std::string& out_dir,
              const std::string& resume_path, int pause_after, bool cross_validate,
              bool dump_config) {
    train::TrainConfig config;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) {
            std::cerr << "error: cannot open config: " << config_path << "\n";
            return 1;
        }
        config = nlohmann::json::parse(f).get<train::TrainConfig>();
    }
    if (dump_config) {
        std::cout << nlohmann::json(config).dump(2) << "\n";
        return 0;
    }
    fs::create_directories(out_dir);

    train::Dataset source, target;
    std::string input_checksum;
    if (!source_manifest.empty()) {
        source = io::load_dataset(io::read_manifest(source_manifest), 0);
        input_checksum += io::file_fnv_checksum(source_manifest);
    }
    if (target_manifest.empty()) {
        std::cerr << "error: --target manifest is required\n";
        return 1;
    }
    target = io::load_dataset(io::read_manifest(target_manifest), 1);
    input_checksum += io::file_fnv_checksum(target_manifest);

    if (train::strategy_uses_source(config.strategy) && source.empty()) {
        std::cerr << "error: strategy " << train::strategy_name(config.strategy)
                  << " requires --source with preprocessed nights\n";
        return 1;
    }

    io::RunRecord record;
    record.config_snapshot = config;
    record.input_checksum = checksum_hex(fnv1a(input_checksum.data(), input_checksum.size()));
    record.started_at = now_iso8601();

    if (cross_validate) {
        auto cv = train::run_cross_validation<double>(source, target, config);
        nlohmann::json folds = nlohmann::json::array();
        for (const auto& fold : cv.folds) {
            nlohmann::json jf;
            jf["pooled"] = fold.pooled;
            folds.push_back(jf);
        }
        record.metrics = {{"mean_accuracy", cv.mean_accuracy},
                          {"sd_accuracy", cv.sd_accuracy},
                          {"mean_kappa", cv.mean_kappa},
                          {"folds", folds}};
        record.finished_at = now_iso8601();
        io::write_run_record(record, out_dir + "/run_record.json");
        std::cout << "cross-validation accuracy " << cv.mean_accuracy << " +/- " << cv.sd_accuracy
                  << "\n";
        return 0;
    }

    net::StagingModel<double> model(config.net, config.seed);
    train::Adam<double> opt_fc, opt_d;
    auto fc = model.extractor_params();
    auto cp = model.classifier_params();
    fc.insert(fc.end(), cp.begin(), cp.end());
    opt_fc.attach(fc);
    opt_d.attach(model.discriminator_params());

    train::LoopState<double> state;
    if (!resume_path.empty()) {
        auto ckpt = ckpt::read_checkpoint(resume_path);
        ckpt::load_into_model(ckpt, model, &opt_fc, &opt_d);
        if (!ckpt::load_loop_state(ckpt, model, &state)) {
            std::cerr << "error: checkpoint has no training-loop state to resume\n";
            return 1;
        }
    }
    auto result = train::run_training(model, opt_fc, opt_d, source, target, config, &state,
                                      pause_after);
    train::write_history_csv(result.history, out_dir + "/history.csv");

    auto ckpt = ckpt::make_checkpoint(model, &opt_fc, &opt_d, nlohmann::json{{"train", config}});
    ckpt::add_loop_state(&ckpt, state, model);
    const std::string ckpt_path = out_dir + "/checkpoint.bin";
    ckpt::write_checkpoint(ckpt, ckpt_path);

    record.model_checksum = ckpt::file_checksum(ckpt_path);
    record.metrics = {{"best_val_acc", result.best_val_acc},
                      {"best_epoch", result.best_epoch},
                      {"epochs_run", result.epochs_run}};
    record.finished_at = now_iso8601();
    io::write_run_record(record, out_dir + "/run_record.json");
    std::cout << "trained " << result.epochs_run << " epochs, best val acc "
              << result.best_val_acc << " -> " << ckpt_path << "\n";
    return 0;
}

// -----------------------------------------------------------------------
// stage
// -----------------------------------------------------------------------

int cmd_stage(const std::string& checkpoint_path, const std::string& manifest_path, int l_seq,
              const std::string& out_dir) {
    auto ckpt = ckpt::read_checkpoint(checkpoint_path);
    auto model = ckpt::model_from_checkpoint<double>(ckpt);
    const std::string checksum = ckpt::file_checksum(checkpoint_path);
    auto manifest = io::read_manifest(manifest_path);
    fs::create_directories(out_dir);

    std::size_t failed = 0, staged = 0;
    for (const auto& entry : manifest.nights) {
        if (entry.respiration_path.empty()) continue;
        if (!entry.status.empty() && entry.status.rfind("ok", 0) != 0) continue;
        try {
            infer::NightInput night;
            night.respiration = read_waveform_csv(entry.respiration_path).values;
            night.activity = read_waveform_csv(entry.activity_path).values;
            auto ens = infer::sliding_predict(night, *model, l_seq);
            if (ens.short_night_fallback)
                std::cerr << "night " << entry.night_id
                          << ": shorter than L_seq, single-window fallback\n";
            auto stages = infer::stage_night(ens);
            std::size_t lights_off = 0, lights_on = stages.size();
            if (!entry.labels_path.empty()) {
                auto labels = io::read_night_labels(entry.labels_path);
                lights_off = std::min(labels.lights_off, stages.size());
                lights_on = std::min(labels.lights_on, stages.size());
                if (lights_off >= lights_on) {
                    lights_off = 0;
                    lights_on = stages.size();
                }
            }
            auto hyp = infer::emit_hypnogram(stages, lights_off, lights_on);
            infer::HypnogramSidecar sidecar;
            sidecar.night_id = entry.night_id;
            sidecar.l_seq = l_seq;
            sidecar.model_checksum = checksum;
            infer::write_hypnogram_csv(hyp, sidecar,
                                       out_dir + "/" + entry.night_id + ".hypnogram.csv");
            ++staged;
        } catch (const std::exception& e) {
            std::cerr << "night " << entry.night_id << ": failed: " << e.what() << "\n";
            ++failed;
        }
    }
    std::cout << "staged " << staged << " nights -> " << out_dir << "\n";
    if (staged == 0 && failed) return 1;
    return failed ? 2 : 0;
}

// -----------------------------------------------------------------------
// evaluate
// -----------------------------------------------------------------------

metrics::Hypnogram reference_for(const std::string& pred_path, const std::string& night_id,
                                 const std::string& ref_dir) {
    const std::string same_name = ref_dir + "/" + fs::path(pred_path).filename().string();
    if (fs::exists(same_name)) return infer::read_hypnogram_csv(same_name);
    // otherwise look for ground-truth labels, stripping any position suffix
    std::string base = night_id;
    for (const char* suffix : {"_bedside", "_overhead", "_wall"}) {
        auto pos = base.rfind(suffix);
        if (pos != std::string::npos && pos + std::strlen(suffix) == base.size()) {
            base = base.substr(0, pos);
            break;
        }
    }
    const std::string labels_path = ref_dir + "/" + base + ".labels.json";
    if (!fs::exists(labels_path))
        throw FormatError("no reference for night " + night_id + " in " + ref_dir);
    auto labels = io::read_night_labels(labels_path);
    metrics::Hypnogram ref;
    ref.stages = labels.stages;
    ref.lights_off = labels.lights_off;
    ref.lights_on = labels.lights_on;
    return ref;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& ref_dir,
                 const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::vector<std::string> pred_files;
    for (const auto& e : fs::directory_iterator(pred_dir)) {
        auto name = e.path().filename().string();
        if (name.size() > 14 && name.substr(name.size() - 14) == ".hypnogram.csv")
            pred_files.push_back(e.path().string());
    }
    std::sort(pred_files.begin(), pred_files.end());
    if (pred_files.empty()) {
        std::cerr << "error: no *.hypnogram.csv files in " << pred_dir << "\n";
        return 1;
    }

    std::vector<metrics::AgreementReport> reports;
    std::vector<metrics::SleepSummary> pred_summaries, ref_summaries;
    std::vector<std::string> missing;
    std::vector<std::string> night_ids;
    for (const auto& path : pred_files) {
        infer::HypnogramSidecar sidecar;
        auto pred = infer::read_hypnogram_csv(path, &sidecar);
        metrics::Hypnogram ref;
        try {
            ref = reference_for(path, sidecar.night_id, ref_dir);
        } catch (const std::exception& e) {
            missing.emplace_back(e.what());
            continue;
        }
        std::size_t n = std::min(pred.stages.size(), ref.stages.size());
        if (pred.stages.size() != ref.stages.size()) {
            pred.stages.resize(n);
            if (!pred.confidence.empty()) pred.confidence.resize(n);
            ref.stages.resize(n);
            if (!ref.confidence.empty()) ref.confidence.resize(n);
            pred.lights_on = std::min(pred.lights_on, n);
            ref.lights_on = std::min(ref.lights_on, n);
        }
        reports.push_back(metrics::agreement(pred, ref));
        pred_summaries.push_back(metrics::sleep_parameters(pred));
        ref_summaries.push_back(metrics::sleep_parameters(ref));
        night_ids.push_back(sidecar.night_id);
    }
    if (!missing.empty()) {
        std::cerr << "night-set mismatch between " << pred_dir << " and " << ref_dir << ":\n";
        for (const auto& m : missing) std::cerr << "  " << m << "\n";
        if (reports.empty()) return 1;
    }

    // Table-II-shaped summary: per-class F1 mean +/- SD over nights,
    // accuracy and kappa
    std::array<std::vector<double>, 4> f1s;
    std::vector<double> accs, kappas;
    for (const auto& r : reports) {
        accs.push_back(r.accuracy);
        kappas.push_back(r.kappa);
        for (int c = 0; c < 4; ++c) f1s[static_cast<std::size_t>(c)].push_back(r.f1[static_cast<std::size_t>(c)]);
    }
    {
        std::FILE* f = std::fopen((out_dir + "/summary.csv").c_str(), "w");
        if (!f) throw FormatError("cannot open summary.csv for write");
        std::fputs(
            "f1_w_mean,f1_w_sd,f1_rem_mean,f1_rem_sd,f1_ls_mean,f1_ls_sd,f1_ds_mean,f1_ds_sd,"
            "accuracy_mean,accuracy_sd,kappa_mean,kappa_sd\n",
            f);
        std::fprintf(f, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                     mean_of(f1s[0]), sample_stddev_of(f1s[0]), mean_of(f1s[1]),
                     sample_stddev_of(f1s[1]), mean_of(f1s[2]), sample_stddev_of(f1s[2]),
                     mean_of(f1s[3]), sample_stddev_of(f1s[3]), mean_of(accs),
                     sample_stddev_of(accs), mean_of(kappas), sample_stddev_of(kappas));
        std::fclose(f);
    }
    nlohmann::json out;
    out["nights"] = nlohmann::json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        nlohmann::json jn;
        jn["night_id"] = night_ids[i];
        jn["agreement"] = reports[i];
        jn["predicted_summary"] = pred_summaries[i];
        jn["reference_summary"] = ref_summaries[i];
        out["nights"].push_back(jn);
    }
    out["accuracy_mean"] = mean_of(accs);
    out["accuracy_sd"] = sample_stddev_of(accs);
    out["kappa_mean"] = mean_of(kappas);
    if (reports.size() >= 2) out["bias"] = metrics::cohort_bias(pred_summaries, ref_summaries);
    std::ofstream jf(out_dir + "/evaluation.json");
    jf << out.dump(2) << "\n";

    std::cout << "evaluated " << reports.size() << " nights: accuracy " << mean_of(accs)
              << " +/- " << sample_stddev_of(accs) << ", kappa " << mean_of(kappas) << "\n";
    return missing.empty() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"somnoradar: impulse-radar sleep staging toolkit"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, manifest_path, source_manifest, target_manifest;
    std::string config_path, checkpoint_path, resume_path, pred_dir, ref_dir;
    int l_seq = 32;  // default input sequence length (epochs)
    int pause_after = -1;
    bool cross_validate = false, dump_config = false;

    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort from a spec file");
    synth->add_option("--spec", spec_path, "cohort request JSON")->required();
    synth->add_option("--out", out_dir, "output directory")->required();

    auto* preprocess =
        app.add_subcommand("preprocess", "extract 10 Hz respiration/activity channels per night");
    preprocess->add_option("--manifest", manifest_path, "cohort manifest")->required();
    preprocess->add_option("--out", out_dir, "output directory")->required();

    auto* train_cmd = app.add_subcommand("train", "train the staging network");
    train_cmd->add_option("--source", source_manifest, "source-domain channels manifest");
    train_cmd->add_option("--target", target_manifest, "target-domain channels manifest");
    train_cmd->add_option("--config", config_path, "training config JSON");
    train_cmd->add_option("--out", out_dir, "output directory");
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
    train_cmd->add_option("--pause-after", pause_after, "pause after N epochs (resumable)");
    train_cmd->add_flag("--cv", cross_validate, "run 5-fold subject-disjoint cross-validation");
    train_cmd->add_flag("--dump-config", dump_config, "print the effective config and exit");

    auto* stage = app.add_subcommand("stage", "predict hypnograms for a cohort");
    stage->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    stage->add_option("--manifest", manifest_path, "channels manifest")->required();
    stage->add_option("--l-seq", l_seq, "input sequence length in epochs");
    stage->add_option("--out", out_dir, "output directory")->required();

    auto* evaluate = app.add_subcommand("evaluate", "score predicted against reference hypnograms");
    evaluate->add_option("--pred", pred_dir, "directory of predicted hypnograms")->required();
    evaluate->add_option("--ref", ref_dir, "directory of references (hypnograms or labels)")
        ->required();
    evaluate->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(spec_path, out_dir);
        if (preprocess->parsed()) return cmd_preprocess(manifest_path, out_dir);
        if (train_cmd->parsed())
            return cmd_train(source_manifest, target_manifest, config_path,
                             out_dir.empty() ? "." : out_dir, resume_path, pause_after,
                             cross_validate, dump_config);
        if (stage->parsed()) return cmd_stage(checkpoint_path, manifest_path, l_seq, out_dir);
        if (evaluate->parsed()) return cmd_evaluate(pred_dir, ref_dir, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "fatal: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
