#pragma once

// Model checkpoints: a self-describing binary container holding a JSON
// hyperparameter record plus named float64 little-endian tensors (parameters,
// batch-norm buffers and optimizer moments). Save/load round-trips are
// bit-exact; a checksum of the file identifies the model in hypnogram
// sidecars and run records.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"
#include "somnoradar/net.hpp"
#include "somnoradar/train.hpp"

namespace somnoradar::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    std::vector<double> data;  // column-major
};

struct Checkpoint {
    nlohmann::json record;  // hyperparameters, seed, rng state, step counts
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

template <class Scalar>
NamedTensor to_tensor(const std::string& name, const net::Mat<Scalar>& m) {
    NamedTensor t;
    t.name = name;
    t.rows = m.rows();
    t.cols = m.cols();
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            t.data[static_cast<std::size_t>(c * m.rows() + r)] = static_cast<double>(m(r, c));
    return t;
}

template <class Scalar>
void from_tensor(const NamedTensor& t, net::Mat<Scalar>* m) {
    if (m->rows() != t.rows || m->cols() != t.cols)
        throw FormatError("checkpoint: shape mismatch for " + t.name);
    for (Eigen::Index c = 0; c < t.cols; ++c)
        for (Eigen::Index r = 0; r < t.rows; ++r)
            (*m)(r, c) = static_cast<Scalar>(t.data[static_cast<std::size_t>(c * t.rows + r)]);
}

inline void write_u32(std::FILE* f, std::uint32_t v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw FormatError("checkpoint: short write");
}
inline void write_u64(std::FILE* f, std::uint64_t v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw FormatError("checkpoint: short write");
}
inline std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw FormatError("checkpoint: short read");
    return v;
}
inline std::uint64_t read_u64(std::FILE* f) {
    std::uint64_t v;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw FormatError("checkpoint: short read");
    return v;
}

}  // namespace detail

inline void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw FormatError("cannot open for write: " + path);
    std::fwrite("SRCP", 1, 4, f);
    detail::write_u32(f, kCheckpointVersion);
    const std::string record = ckpt.record.dump();
    detail::write_u64(f, record.size());
    std::fwrite(record.data(), 1, record.size(), f);
    detail::write_u64(f, ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
        detail::write_u32(f, static_cast<std::uint32_t>(t.name.size()));
        std::fwrite(t.name.data(), 1, t.name.size(), f);
        detail::write_u64(f, static_cast<std::uint64_t>(t.rows));
        detail::write_u64(f, static_cast<std::uint64_t>(t.cols));
        if (!t.data.empty() &&
            std::fwrite(t.data.data(), sizeof(double), t.data.size(), f) != t.data.size()) {
            std::fclose(f);
            throw FormatError("checkpoint: short tensor write");
        }
    }
    std::fclose(f);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open: " + path);
    try {
        char magic[4];
        if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "SRCP", 4) != 0)
            throw FormatError("not a checkpoint file: " + path);
        if (detail::read_u32(f) != kCheckpointVersion)
            throw FormatError("unsupported checkpoint version");
        Checkpoint ckpt;
        auto record_len = detail::read_u64(f);
        std::string record(record_len, '\0');
        if (std::fread(record.data(), 1, record_len, f) != record_len)
            throw FormatError("checkpoint: truncated record");
        ckpt.record = nlohmann::json::parse(record);
        auto count = detail::read_u64(f);
        for (std::uint64_t i = 0; i < count; ++i) {
            NamedTensor t;
            auto name_len = detail::read_u32(f);
            t.name.resize(name_len);
            if (std::fread(t.name.data(), 1, name_len, f) != name_len)
                throw FormatError("checkpoint: truncated name");
            t.rows = static_cast<Eigen::Index>(detail::read_u64(f));
            t.cols = static_cast<Eigen::Index>(detail::read_u64(f));
            t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
            if (!t.data.empty() &&
                std::fread(t.data.data(), sizeof(double), t.data.size(), f) != t.data.size())
                throw FormatError("checkpoint: truncated tensor");
            ckpt.tensors.push_back(std::move(t));
        }
        std::fclose(f);
        return ckpt;
    } catch (...) {
        std::fclose(f);
        throw;
    }
}

/// Serializes the model plus (optionally) optimizer state and loop position.
template <class Scalar>
Checkpoint make_checkpoint(net::StagingModel<Scalar>& model, train::Adam<Scalar>* opt_fc = nullptr,
                           train::Adam<Scalar>* opt_d = nullptr,
                           const nlohmann::json& extra = {}) {
    Checkpoint ckpt;
    ckpt.record["format"] = "somnoradar-checkpoint";
    ckpt.record["version"] = kCheckpointVersion;
    ckpt.record["net"] = model.config();
    ckpt.record["seed"] = model.init_seed();
    ckpt.record["scalar"] = std::is_same_v<Scalar, double> ? "double" : "float";
    if (!extra.is_null() && !extra.empty()) ckpt.record["extra"] = extra;
    for (auto* p : model.all_params()) ckpt.tensors.push_back(detail::to_tensor(p->name, p->value));
    for (auto* b : model.buffers()) ckpt.tensors.push_back(detail::to_tensor(b->name, b->value));
    auto dump_adam = [&](train::Adam<Scalar>* opt, const std::string& prefix) {
        if (!opt) return;
        ckpt.record[prefix + "_steps"] = opt->step_count();
        const auto& params = opt->params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            ckpt.tensors.push_back(detail::to_tensor(prefix + ".m." + params[i]->name,
                                                     opt->moments_m()[i]));
            ckpt.tensors.push_back(detail::to_tensor(prefix + ".v." + params[i]->name,
                                                     opt->moments_v()[i]));
        }
    };
    dump_adam(opt_fc, "adam_fc");
    dump_adam(opt_d, "adam_d");
    return ckpt;
}

/// Restores parameters/buffers (and optimizer state when present) into an
/// already-constructed model of the same configuration.
template <class Scalar>
void load_into_model(const Checkpoint& ckpt, net::StagingModel<Scalar>& model,
                     train::Adam<Scalar>* opt_fc = nullptr, train::Adam<Scalar>* opt_d = nullptr) {
    for (auto* p : model.all_params()) {
        const auto* t = ckpt.find(p->name);
        if (!t) throw FormatError("checkpoint: missing tensor " + p->name);
        detail::from_tensor(*t, &p->value);
    }
    for (auto* b : model.buffers()) {
        const auto* t = ckpt.find(b->name);
        if (!t) throw FormatError("checkpoint: missing buffer " + b->name);
        detail::from_tensor(*t, &b->value);
    }
    auto load_adam = [&](train::Adam<Scalar>* opt, const std::string& prefix) {
        if (!opt) return;
        if (!ckpt.record.contains(prefix + "_steps")) return;
        opt->set_step_count(ckpt.record.at(prefix + "_steps").get<long>());
        const auto& params = opt->params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto* m = ckpt.find(prefix + ".m." + params[i]->name);
            const auto* v = ckpt.find(prefix + ".v." + params[i]->name);
            if (!m || !v) throw FormatError("checkpoint: missing optimizer state for " +
                                            params[i]->name);
            detail::from_tensor(*m, &opt->moments_m()[i]);
            detail::from_tensor(*v, &opt->moments_v()[i]);
        }
    };
    load_adam(opt_fc, "adam_fc");
    load_adam(opt_d, "adam_d");
}

/// Adds a paused training-loop position to the checkpoint.
template <class Scalar>
void add_loop_state(Checkpoint* ckpt, const train::LoopState<Scalar>& state,
                    net::StagingModel<Scalar>& model) {
    ckpt->record["loop"] = {{"next_epoch", state.next_epoch},
                            {"since_best", state.since_best},
                            {"best_val_acc", state.best_val_acc},
                            {"best_epoch", state.best_epoch},
                            {"rng_state", state.rng_state}};
    std::size_t i = 0;
    for (auto* p : model.all_params())
        ckpt->tensors.push_back(detail::to_tensor("best." + p->name, state.best_values[i++]));
    for (auto* b : model.buffers())
        ckpt->tensors.push_back(detail::to_tensor("best." + b->name, state.best_values[i++]));
}

template <class Scalar>
bool load_loop_state(const Checkpoint& ckpt, net::StagingModel<Scalar>& model,
                     train::LoopState<Scalar>* state) {
    if (!ckpt.record.contains("loop")) return false;
    const auto& j = ckpt.record.at("loop");
    j.at("next_epoch").get_to(state->next_epoch);
    j.at("since_best").get_to(state->since_best);
    j.at("best_val_acc").get_to(state->best_val_acc);
    j.at("best_epoch").get_to(state->best_epoch);
    j.at("rng_state").get_to(state->rng_state);
    state->best_values.clear();
    auto grab = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        const auto* t = ckpt.find("best." + name);
        if (!t) throw FormatError("checkpoint: missing loop tensor " + name);
        net::Mat<Scalar> m(rows, cols);
        detail::from_tensor(*t, &m);
        state->best_values.push_back(std::move(m));
    };
    for (auto* p : model.all_params()) grab(p->name, p->value.rows(), p->value.cols());
    for (auto* b : model.buffers()) grab(b->name, b->value.rows(), b->value.cols());
    return true;
}

/// Constructs a model of the checkpoint's configuration and loads it.
template <class Scalar>
std::unique_ptr<net::StagingModel<Scalar>> model_from_checkpoint(const Checkpoint& ckpt) {
    auto cfg = ckpt.record.at("net").get<net::NetConfig>();
    auto seed = ckpt.record.at("seed").get<std::uint64_t>();
    auto model = std::make_unique<net::StagingModel<Scalar>>(cfg, seed);
    load_into_model(ckpt, *model);
    return model;
}

inline std::string file_checksum(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) h = fnv1a(buf, n, h);
    std::fclose(f);
    return checksum_hex(h);
}

}  // namespace somnoradar::ckpt
