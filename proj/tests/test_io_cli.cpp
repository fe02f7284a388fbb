#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "somnoradar/checkpoint.hpp"
#include "somnoradar/cohort.hpp"
#include "somnoradar/manifest.hpp"
#include "test_support.hpp"

using namespace somnoradar;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(SOMNORADAR_CLI_PATH) + " " + args + " >> /tmp/sr_cli_log.txt 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

struct TempTree {
    fs::path root;
    TempTree() : root(fs::temp_directory_path() / "somnoradar_cli_test") {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TempTree() { fs::remove_all(root); }
    std::string path(const std::string& sub) const { return (root / sub).string(); }
};

void write_cohort_request(const std::string& path, const std::string& id,
                          const std::string& domain, int subjects, int epochs,
                          std::uint64_t seed) {
    io::CohortRequest request;
    request.cohort_id = id;
    request.domain = domain;
    request.spec.subjects = subjects;
    request.spec.night_epochs = epochs;
    request.spec.seed = seed;
    std::ofstream f(path);
    f << nlohmann::json(request).dump(2);
}

void write_train_config(const std::string& path, std::uint64_t seed) {
    nlohmann::json net = {{"epoch_samples", 300},
                          {"block_channels", {8, 8, 8, 8, 8, 8}},
                          {"strides", {1, 2, 2, 2, 2, 2}},
                          {"dilations", {1, 1, 2, 4, 8, 16}},
                          {"bottleneck_divisor", 4},
                          {"lstm_hidden", 8},
                          {"attention_dim", 8},
                          {"head_hidden", 8},
                          {"dropout", 0.3},
                          {"leaky_slope", 0.01},
                          {"bn_momentum", 0.1},
                          {"bn_epsilon", 1e-5},
                          {"use_activity", true}};
    nlohmann::json cfg = {{"strategy", "pooled_da"},
                          {"l_seq", 4},
                          {"batch_size", 4},
                          {"lr_initial", 0.001},
                          {"lr_halve_every", 10},
                          {"patience", 15},
                          {"max_epochs", 2},
                          {"gamma", 10.0},
                          {"lambda_align", 0.1},
                          {"margin", 1.0},
                          {"class_weighting", false},
                          {"seed", seed},
                          {"net", net}};
    std::ofstream f(path);
    f << cfg.dump(2);
}

}  // namespace

TEST_CASE("manifest round trip and validation", "[io][manifest]") {
    io::Manifest m;
    m.cohort_id = "unit";
    io::NightEntry e;
    e.night_id = "n0";
    e.subject_id = "s0";
    e.domain = "target";
    e.position = "bedside";
    e.cube_path = "/tmp/x.rcub";
    m.nights.push_back(e);
    const std::string path = "/tmp/somnoradar_manifest_test.json";
    io::write_manifest(m, path);
    auto back = io::read_manifest(path);
    REQUIRE(back.cohort_id == "unit");
    REQUIRE(back.nights.size() == 1);
    REQUIRE(back.nights[0].domain == "target");
    fs::remove(path);

    nlohmann::json bad = {{"cohort_id", "x"},
                          {"nights",
                           {{{"night_id", "n"},
                             {"subject_id", "s"},
                             {"domain", "martian"},
                             {"position", ""}}}}};
    REQUIRE_THROWS_AS(bad.get<io::Manifest>(), FormatError);
}

TEST_CASE("cli pipeline end to end", "[cli][e2e]") {
    TempTree tree;
    fs::remove("/tmp/sr_cli_log.txt");

    // --- synth ---------------------------------------------------------
    write_cohort_request(tree.path("src_req.json"), "src", "source", 3, 16, 11);
    write_cohort_request(tree.path("tgt_req.json"), "tgt", "target", 3, 16, 22);
    REQUIRE(run_cli("synth --spec " + tree.path("src_req.json") + " --out " + tree.path("src")) ==
            0);
    REQUIRE(run_cli("synth --spec " + tree.path("tgt_req.json") + " --out " + tree.path("tgt")) ==
            0);
    auto src_manifest = io::read_manifest(tree.path("src/manifest.json"));
    REQUIRE(src_manifest.nights.size() == 3);  // one entry per subject-night
    auto tgt_manifest = io::read_manifest(tree.path("tgt/manifest.json"));
    REQUIRE(tgt_manifest.nights.size() == 3);
    for (const auto& n : tgt_manifest.nights) {
        REQUIRE(n.position == "bedside");
        REQUIRE(fs::exists(n.cube_path));
        REQUIRE(fs::exists(n.labels_path));
    }

    // identical seeds give identical synthetic files
    REQUIRE(run_cli("synth --spec " + tree.path("tgt_req.json") + " --out " + tree.path("tgt2")) ==
            0);
    auto tgt2_manifest = io::read_manifest(tree.path("tgt2/manifest.json"));
    REQUIRE(io::file_fnv_checksum(tgt_manifest.nights[0].cube_path) ==
            io::file_fnv_checksum(tgt2_manifest.nights[0].cube_path));

    // malformed spec: parse error, exit 1
    {
        std::ofstream bad(tree.path("bad.json"));
        bad << "{ not json";
    }
    REQUIRE(run_cli("synth --spec " + tree.path("bad.json") + " --out " + tree.path("bad")) == 1);

    // --- preprocess ------------------------------------------------------
    REQUIRE(run_cli("preprocess --manifest " + tree.path("src/manifest.json") + " --out " +
                    tree.path("src_ch")) == 0);
    REQUIRE(run_cli("preprocess --manifest " + tree.path("tgt/manifest.json") + " --out " +
                    tree.path("tgt_ch")) == 0);
    auto channels = io::read_manifest(tree.path("tgt_ch/channels_manifest.json"));
    for (const auto& n : channels.nights) {
        REQUIRE(n.status.rfind("ok", 0) == 0);
        auto resp = read_waveform_csv(n.respiration_path);
        auto act = read_waveform_csv(n.activity_path);
        REQUIRE(resp.rate == 10.0);
        REQUIRE(resp.values.size() == act.values.size());
        // duration: night seconds x 10 Hz within one sample
        REQUIRE(std::llabs(static_cast<long long>(resp.values.size()) - 16 * 300) <= 10);
    }

    // --- train -----------------------------------------------------------
    write_train_config(tree.path("train.json"), 7);
    REQUIRE(run_cli("train --source " + tree.path("src_ch/channels_manifest.json") + " --target " +
                    tree.path("tgt_ch/channels_manifest.json") + " --config " +
                    tree.path("train.json") + " --out " + tree.path("run")) == 0);
    REQUIRE(fs::exists(tree.path("run/checkpoint.bin")));
    REQUIRE(fs::exists(tree.path("run/history.csv")));
    REQUIRE(fs::exists(tree.path("run/run_record.json")));

    // missing source with a pooled strategy: config error
    REQUIRE(run_cli("train --target " + tree.path("tgt_ch/channels_manifest.json") + " --config " +
                    tree.path("train.json") + " --out " + tree.path("run_bad")) == 1);

    // resume reproduces the full run bit-exactly
    REQUIRE(run_cli("train --source " + tree.path("src_ch/channels_manifest.json") + " --target " +
                    tree.path("tgt_ch/channels_manifest.json") + " --config " +
                    tree.path("train.json") + " --pause-after 1 --out " + tree.path("run_p1")) ==
            0);
    REQUIRE(run_cli("train --source " + tree.path("src_ch/channels_manifest.json") + " --target " +
                    tree.path("tgt_ch/channels_manifest.json") + " --config " +
                    tree.path("train.json") + " --resume " + tree.path("run_p1/checkpoint.bin") +
                    " --out " + tree.path("run_p2")) == 0);
    REQUIRE(ckpt::file_checksum(tree.path("run/checkpoint.bin")) ==
            ckpt::file_checksum(tree.path("run_p2/checkpoint.bin")));

    // --- stage -------------------------------------------------------------
    REQUIRE(run_cli("stage --checkpoint " + tree.path("run/checkpoint.bin") + " --manifest " +
                    tree.path("tgt_ch/channels_manifest.json") + " --l-seq 4 --out " +
                    tree.path("pred")) == 0);
    std::size_t hyp_count = 0;
    for (const auto& e : fs::directory_iterator(tree.path("pred"))) {
        if (e.path().extension() == ".csv") ++hyp_count;
    }
    REQUIRE(hyp_count == 3);  // one CSV per night

    // --- evaluate ------------------------------------------------------------
    REQUIRE(run_cli("evaluate --pred " + tree.path("pred") + " --ref " + tree.path("tgt") +
                    " --out " + tree.path("eval")) == 0);
    REQUIRE(fs::exists(tree.path("eval/summary.csv")));
    REQUIRE(fs::exists(tree.path("eval/evaluation.json")));
    {
        std::ifstream f(tree.path("eval/evaluation.json"));
        auto j = nlohmann::json::parse(f);
        REQUIRE(j.at("nights").size() == 3);
        // cross-check one night against the library-level agreement
        REQUIRE(j.at("accuracy_mean").get<double>() >= 0.0);
        REQUIRE(j.at("accuracy_mean").get<double>() <= 1.0);
    }

    // identical dirs: accuracy exactly 1
    REQUIRE(run_cli("evaluate --pred " + tree.path("pred") + " --ref " + tree.path("pred") +
                    " --out " + tree.path("eval_self")) == 0);
    {
        std::ifstream f(tree.path("eval_self/evaluation.json"));
        auto j = nlohmann::json::parse(f);
        REQUIRE(j.at("accuracy_mean").get<double>() == 1.0);
    }

    // mismatched night sets: explicit diff and exit 2
    fs::create_directories(tree.path("ref_partial"));
    bool first = true;
    for (const auto& n : tgt_manifest.nights) {
        if (first) {
            first = false;
            continue;  // drop one night's labels
        }
        fs::copy_file(n.labels_path,
                      tree.path("ref_partial") + "/" + fs::path(n.labels_path).filename().string());
    }
    REQUIRE(run_cli("evaluate --pred " + tree.path("pred") + " --ref " + tree.path("ref_partial") +
                    " --out " + tree.path("eval_diff")) == 2);

    // staging determinism: re-running produces identical hypnogram files
    REQUIRE(run_cli("stage --checkpoint " + tree.path("run/checkpoint.bin") + " --manifest " +
                    tree.path("tgt_ch/channels_manifest.json") + " --l-seq 4 --out " +
                    tree.path("pred2")) == 0);
    for (const auto& e : fs::directory_iterator(tree.path("pred"))) {
        if (e.path().extension() != ".csv") continue;
        auto other = tree.path("pred2") + "/" + e.path().filename().string();
        REQUIRE(io::file_fnv_checksum(e.path().string()) == io::file_fnv_checksum(other));
    }
}
