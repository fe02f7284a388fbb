#pragma once

// Training: the mixed-batch domain-adversarial loop (discriminator step then
// extractor+classifier step through gradient reversal), the adversarial
// weight ramp, learning-rate halving, early stopping, and subject-disjoint
// 5-fold cross-validation over the four training strategies.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"
#include "somnoradar/infer.hpp"
#include "somnoradar/losses.hpp"
#include "somnoradar/metrics.hpp"
#include "somnoradar/net.hpp"

namespace somnoradar::train {

// ---------------------------------------------------------------------------
// Strategy / configuration
// ---------------------------------------------------------------------------

enum class Strategy : int {
    TargetOnly = 1,       // trained and tested on the radar cohort
    PooledNoDa = 2,       // source + target, no adaptation (discriminator removed)
    PooledDa = 3,         // source + target with domain adaptation
    CrossPositionDa = 4,  // source + bedside target, tested on overhead
};

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::TargetOnly: return "target_only";
        case Strategy::PooledNoDa: return "pooled_no_da";
        case Strategy::PooledDa: return "pooled_da";
        case Strategy::CrossPositionDa: return "cross_position_da";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
    if (s == "target_only") return Strategy::TargetOnly;
    if (s == "pooled_no_da") return Strategy::PooledNoDa;
    if (s == "pooled_da") return Strategy::PooledDa;
    if (s == "cross_position_da") return Strategy::CrossPositionDa;
    throw ConfigError("unknown strategy: " + s);
}

inline bool strategy_uses_source(Strategy s) { return s != Strategy::TargetOnly; }
inline bool strategy_uses_adaptation(Strategy s) {
    return s == Strategy::PooledDa || s == Strategy::CrossPositionDa;
}

struct TrainConfig {
    Strategy strategy = Strategy::PooledDa;
    int l_seq = 32;
    int batch_size = 16;  // sequences per step; pooled strategies split it evenly
    double lr_initial = 0.001;
    int lr_halve_every = 10;  // epochs
    int patience = 15;        // epochs without improvement
    int max_epochs = 100;     // also anchors the progress ramp p
    double gamma = 10.0;      // lambda_adv ramp steepness
    double lambda_align = 0.1;
    double margin = 1.0;
    bool class_weighting = true;
    double validation_fraction = 0.1;  // of training subjects, per domain
    std::uint64_t seed = 1;
    net::NetConfig net;

    void validate() const {
        net.validate();
        if (l_seq != 4 && l_seq != 8 && l_seq != 16 && l_seq != 32 && l_seq != 64)
            throw ConfigError("train config: l_seq must be one of {4, 8, 16, 32, 64}");
        if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
        if (max_epochs < 1) throw ConfigError("train config: max_epochs must be >= 1");
    }

    double learning_rate(int epoch) const {
        return lr_initial * std::pow(0.5, epoch / lr_halve_every);
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"strategy", strategy_name(c.strategy)},
         {"l_seq", c.l_seq},
         {"batch_size", c.batch_size},
         {"lr_initial", c.lr_initial},
         {"lr_halve_every", c.lr_halve_every},
         {"patience", c.patience},
         {"max_epochs", c.max_epochs},
         {"gamma", c.gamma},
         {"lambda_align", c.lambda_align},
         {"margin", c.margin},
         {"class_weighting", c.class_weighting},
         {"validation_fraction", c.validation_fraction},
         {"seed", c.seed},
         {"net", c.net}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    j.at("l_seq").get_to(c.l_seq);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr_initial").get_to(c.lr_initial);
    j.at("lr_halve_every").get_to(c.lr_halve_every);
    j.at("patience").get_to(c.patience);
    j.at("max_epochs").get_to(c.max_epochs);
    j.at("gamma").get_to(c.gamma);
    j.at("lambda_align").get_to(c.lambda_align);
    j.at("margin").get_to(c.margin);
    j.at("class_weighting").get_to(c.class_weighting);
    if (j.contains("validation_fraction")) j.at("validation_fraction").get_to(c.validation_fraction);
    j.at("seed").get_to(c.seed);
    j.at("net").get_to(c.net);
    c.validate();
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct NightRecord {
    std::string night_id;
    std::string subject_id;
    int domain = 1;        // 0 source, 1 target
    std::string position;  // "bedside" / "overhead" / "wall"; empty for source
    std::vector<double> respiration;  // 10 Hz normalized
    std::vector<double> activity;
    std::vector<int> labels;  // per 30-s epoch

    std::size_t epochs() const {
        return std::min(respiration.size() / 300, labels.size());
    }
};

using Dataset = std::vector<NightRecord>;

struct SequenceRef {
    std::size_t night = 0;
    std::size_t start_epoch = 0;
};

/// Non-overlapping training windows plus a tail-aligned window when the
/// night length is not a multiple of L_seq.
inline std::vector<SequenceRef> training_sequences(const Dataset& ds, int l_seq) {
    std::vector<SequenceRef> out;
    for (std::size_t n = 0; n < ds.size(); ++n) {
        const std::size_t epochs = ds[n].epochs();
        if (epochs < static_cast<std::size_t>(l_seq)) continue;
        std::size_t s = 0;
        for (; s + static_cast<std::size_t>(l_seq) <= epochs; s += static_cast<std::size_t>(l_seq))
            out.push_back({n, s});
        if (s < epochs) out.push_back({n, epochs - static_cast<std::size_t>(l_seq)});
    }
    return out;
}

template <class Scalar>
net::SeqBatch<Scalar> make_batch(const Dataset& ds, const std::vector<SequenceRef>& picks,
                                 int l_seq, int epoch_samples) {
    net::SeqBatch<Scalar> batch;
    batch.batch = static_cast<int>(picks.size());
    batch.len = l_seq;
    const auto cols = static_cast<Eigen::Index>(picks.size()) * l_seq * epoch_samples;
    batch.respiration.resize(1, cols);
    batch.activity.resize(1, cols);
    batch.labels.resize(picks.size() * static_cast<std::size_t>(l_seq));
    batch.domains.resize(batch.labels.size());
    for (std::size_t w = 0; w < picks.size(); ++w) {
        const auto& night = ds[picks[w].night];
        const std::size_t sample0 = picks[w].start_epoch * static_cast<std::size_t>(epoch_samples);
        const auto base = static_cast<Eigen::Index>(w) * l_seq * epoch_samples;
        for (int i = 0; i < l_seq * epoch_samples; ++i) {
            batch.respiration(0, base + i) = static_cast<Scalar>(night.respiration[sample0 + i]);
            batch.activity(0, base + i) = static_cast<Scalar>(night.activity[sample0 + i]);
        }
        for (int t = 0; t < l_seq; ++t) {
            const std::size_t item = w * static_cast<std::size_t>(l_seq) + static_cast<std::size_t>(t);
            batch.labels[item] = night.labels[picks[w].start_epoch + static_cast<std::size_t>(t)];
            batch.domains[item] = night.domain;
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class Scalar>
class Adam {
  public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

    void attach(const std::vector<net::Parameter<Scalar>*>& params) {
        params_ = params;
        m_.clear();
        v_.clear();
        for (auto* p : params) {
            m_.push_back(net::Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(net::Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
        }
        step_count_ = 0;
    }

    void step(double lr) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, step_count_);
        const double bc2 = 1.0 - std::pow(beta2_, step_count_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            m_[i] = static_cast<Scalar>(beta1_) * m_[i] + static_cast<Scalar>(1.0 - beta1_) * p.grad;
            v_[i] = (static_cast<Scalar>(beta2_) * v_[i].array() +
                     static_cast<Scalar>(1.0 - beta2_) * p.grad.array().square())
                        .matrix();
            auto m_hat = m_[i].array() / static_cast<Scalar>(bc1);
            auto v_hat = v_[i].array() / static_cast<Scalar>(bc2);
            p.value.array() -=
                static_cast<Scalar>(lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(eps_));
        }
    }

    long step_count() const { return step_count_; }
    void set_step_count(long n) { step_count_ = n; }
    std::vector<net::Mat<Scalar>>& moments_m() { return m_; }
    std::vector<net::Mat<Scalar>>& moments_v() { return v_; }
    const std::vector<net::Parameter<Scalar>*>& params() const { return params_; }

  private:
    double beta1_, beta2_, eps_;
    std::vector<net::Parameter<Scalar>*> params_;
    std::vector<net::Mat<Scalar>> m_, v_;
    long step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

struct LossReport {
    double l_cls = 0.0;
    double l_dom = 0.0;
    double l_align = 0.0;
    double lambda_adv = 0.0;
    double total = 0.0;
    bool aborted = false;
    std::string offending_term;
    bool dom_flagged = false;
    bool align_flagged = false;
};

namespace detail {

inline bool check_term(double value, const char* name, LossReport* report) {
    if (std::isfinite(value)) return true;
    report->aborted = true;
    report->offending_term = name;
    return false;
}

}  // namespace detail

/// Plain supervised update (strategies 1 and 2: no discriminator at all).
template <class Scalar>
LossReport supervised_step(net::StagingModel<Scalar>& model, Adam<Scalar>& opt_fc,
                           const net::SeqBatch<Scalar>& batch,
                           const std::array<double, 4>& weights, double lr, Rng& rng) {
    LossReport report;
    auto z = model.extract(batch, net::Mode::Train, &rng);
    auto logits = model.classify_logits(z);
    net::Mat<Scalar> dlogits;
    auto cls = classification_loss_grad(logits, batch.labels, weights, &dlogits);
    report.l_cls = cls.value;
    report.total = cls.value;
    if (!detail::check_term(cls.value, "L_cls", &report)) return report;
    model.zero_grads();
    auto dz = model.classifier_backward(dlogits);
    model.extract_backward(dz);
    opt_fc.step(lr);
    return report;
}

/// Adversarial update: (3) the discriminator minimizes L_dom on the current
/// features, then (4) the extractor and classifier minimize
/// L_cls - lambda_adv * L_dom + lambda_align * L_align through the
/// gradient-reversal layer, with the freshly updated discriminator frozen.
template <class Scalar>
LossReport train_step(net::StagingModel<Scalar>& model, Adam<Scalar>& opt_fc, Adam<Scalar>& opt_d,
                      const net::SeqBatch<Scalar>& batch, const std::array<double, 4>& weights,
                      double lambda_adv, double lambda_align, double margin, double lr, Rng& rng) {
    LossReport report;
    report.lambda_adv = lambda_adv;
    auto z = model.extract(batch, net::Mode::Train, &rng);

    // (3) discriminator on detached features
    {
        auto d_logits = model.discriminate_logits(z);
        net::Mat<Scalar> ddisc;
        auto dom = domain_loss_grad(d_logits, batch.domains, &ddisc);
        if (!detail::check_term(dom.value, "L_dom", &report)) return report;
        model.zero_grads();
        model.discriminator_backward(ddisc);  // features stay detached
        opt_d.step(lr);
    }

    // (4) extractor + classifier against the updated discriminator
    auto logits = model.classify_logits(z);
    net::Mat<Scalar> dlogits;
    auto cls = classification_loss_grad(logits, batch.labels, weights, &dlogits);

    auto d_logits = model.discriminate_logits(z);
    net::Mat<Scalar> ddisc;
    auto dom = domain_loss_grad(d_logits, batch.domains, &ddisc);

    auto pairing = sample_alignment_pairs(batch.labels, batch.domains, rng);
    net::Mat<Scalar> dz_align;
    auto align = alignment_loss(z, batch.labels, batch.domains, margin, pairing, &dz_align);

    report.l_cls = cls.value;
    report.l_dom = dom.value;
    report.l_align = align.value;
    report.dom_flagged = dom.flagged;
    report.align_flagged = align.flagged;
    report.total = cls.value - lambda_adv * dom.value + lambda_align * align.value;
    if (!detail::check_term(cls.value, "L_cls", &report)) return report;
    if (!detail::check_term(dom.value, "L_dom", &report)) return report;
    if (!detail::check_term(align.value, "L_align", &report)) return report;

    model.zero_grads();
    net::Mat<Scalar> dz = model.classifier_backward(dlogits);
    dz += net::gradient_reversal_backward(model.discriminator_backward(ddisc), lambda_adv);
    dz += dz_align * static_cast<Scalar>(lambda_align);
    model.extract_backward(dz);
    // discriminator gradients from step (4) are discarded: only F and C move
    for (auto* p : model.discriminator_params()) p->grad.setZero();
    opt_fc.step(lr);
    return report;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryRow {
    int epoch = 0;
    double l_cls = 0.0, l_dom = 0.0, l_align = 0.0;
    double lambda_adv = 0.0, lr = 0.0, val_acc = 0.0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    double best_val_acc = 0.0;
    int best_epoch = -1;
    int epochs_run = 0;
    std::size_t aborted_steps = 0;
};

/// Position of a paused training loop, sufficient to continue bit-exactly.
template <class Scalar>
struct LoopState {
    int next_epoch = 0;
    int since_best = 0;
    double best_val_acc = 0.0;
    int best_epoch = -1;
    std::uint64_t rng_state = 0;
    std::vector<net::Mat<Scalar>> best_values;  // params then buffers
};

inline void write_history_csv(const std::vector<HistoryRow>& history, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw FormatError("cannot open for write: " + path);
    std::fputs("epoch,L_cls,L_dom,L_align,lambda_adv,lr,val_acc\n", f);
    for (const auto& row : history)
        std::fprintf(f, "%d,%.9f,%.9f,%.9f,%.9f,%.9g,%.9f\n", row.epoch, row.l_cls, row.l_dom,
                     row.l_align, row.lambda_adv, row.lr, row.val_acc);
    std::fclose(f);
}

namespace detail {

/// Deterministic subject-level holdout: ~fraction of each domain's training
/// subjects (at least one) go to validation.
inline void split_validation(const Dataset& nights, double fraction, Rng& rng,
                             Dataset* train_out, Dataset* val_out) {
    std::set<std::string> subject_set;
    for (const auto& n : nights) subject_set.insert(n.subject_id);
    std::vector<std::string> subjects(subject_set.begin(), subject_set.end());
    if (subjects.size() < 2) {
        // too few subjects to hold one out: validate on training nights
        *train_out = nights;
        *val_out = nights;
        return;
    }
    rng.shuffle(subjects);
    auto n_val = static_cast<std::size_t>(
        std::max(1.0, std::ceil(fraction * static_cast<double>(subjects.size()))));
    std::set<std::string> val_subjects(subjects.begin(),
                                       subjects.begin() + static_cast<std::ptrdiff_t>(n_val));
    for (const auto& n : nights) {
        if (val_subjects.count(n.subject_id))
            val_out->push_back(n);
        else
            train_out->push_back(n);
    }
}

template <class Scalar>
double evaluate_accuracy(net::StagingModel<Scalar>& model, const Dataset& nights, int l_seq) {
    std::size_t correct = 0, total = 0;
    auto refs = training_sequences(nights, l_seq);
    const int epoch_samples = model.config().epoch_samples;
    const std::size_t chunk = 16;
    for (std::size_t w0 = 0; w0 < refs.size(); w0 += chunk) {
        std::vector<SequenceRef> picks(refs.begin() + static_cast<std::ptrdiff_t>(w0),
                                       refs.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(refs.size(), w0 + chunk)));
        auto batch = make_batch<Scalar>(nights, picks, l_seq, epoch_samples);
        auto z = model.extract(batch, net::Mode::Eval);
        auto logits = model.classify_logits(z);
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            Eigen::Index best;
            logits.col(c).maxCoeff(&best);
            if (static_cast<int>(best) == batch.labels[static_cast<std::size_t>(c)]) ++correct;
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

template <class Scalar>
std::vector<net::Mat<Scalar>> snapshot_values(net::StagingModel<Scalar>& model) {
    std::vector<net::Mat<Scalar>> out;
    for (auto* p : model.all_params()) out.push_back(p->value);
    for (auto* b : model.buffers()) out.push_back(b->value);
    return out;
}

template <class Scalar>
void restore_values(net::StagingModel<Scalar>& model, const std::vector<net::Mat<Scalar>>& snap) {
    std::size_t i = 0;
    for (auto* p : model.all_params()) p->value = snap[i++];
    for (auto* b : model.buffers()) b->value = snap[i++];
}

}  // namespace detail

/// Trains the model in place; on return the parameters hold the
/// best-validation-accuracy checkpoint. When `state` is given, the loop
/// resumes from it and leaves the paused position in it (the model then
/// holds the LAST-epoch parameters so training can continue; the best
/// snapshot lives in the state). `pause_after` stops after that many total
/// epochs without restoring the best snapshot.
template <class Scalar>
TrainResult run_training(net::StagingModel<Scalar>& model, Adam<Scalar>& opt_fc,
                         Adam<Scalar>& opt_d, const Dataset& source, const Dataset& target,
                         const TrainConfig& config, LoopState<Scalar>* state = nullptr,
                         int pause_after = -1) {
    config.validate();
    if (strategy_uses_source(config.strategy) && source.empty())
        throw ConfigError("run_training: strategy requires a source dataset");
    if (target.empty()) throw ConfigError("run_training: target dataset is empty");

    Dataset target_train_all = target;
    if (config.strategy == Strategy::CrossPositionDa) {
        target_train_all.clear();
        for (const auto& n : target)
            if (n.position == "bedside") target_train_all.push_back(n);
        if (target_train_all.empty())
            throw ConfigError("run_training: no bedside-position target nights");
    }

    Rng split_rng(config.seed ^ 0x73706c6974ULL);
    Dataset src_train, src_val, tgt_train, tgt_val;
    if (strategy_uses_source(config.strategy))
        detail::split_validation(source, config.validation_fraction, split_rng, &src_train,
                                 &src_val);
    detail::split_validation(target_train_all, config.validation_fraction, split_rng, &tgt_train,
                             &tgt_val);
    Rng rng(config.seed ^ 0x7472616960ULL);

    auto src_seqs = training_sequences(src_train, config.l_seq);
    auto tgt_seqs = training_sequences(tgt_train, config.l_seq);
    if (tgt_seqs.empty()) throw ConfigError("run_training: no target training sequences");
    if (strategy_uses_source(config.strategy) && src_seqs.empty())
        throw ConfigError("run_training: no source training sequences");

    // class weights over all training labels
    std::vector<int> all_labels;
    for (const auto& n : src_train)
        all_labels.insert(all_labels.end(), n.labels.begin(), n.labels.end());
    for (const auto& n : tgt_train)
        all_labels.insert(all_labels.end(), n.labels.begin(), n.labels.end());
    std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};
    if (config.class_weighting) weights = class_weights(all_labels);

    // validation pool: held-out subjects from every domain in play
    Dataset val_nights = tgt_val;
    val_nights.insert(val_nights.end(), src_val.begin(), src_val.end());

    const bool pooled = strategy_uses_source(config.strategy);
    const bool adversarial = strategy_uses_adaptation(config.strategy);
    const int half = config.batch_size / 2;
    const auto steps_per_epoch = static_cast<int>(
        (tgt_seqs.size() + static_cast<std::size_t>(pooled ? half : config.batch_size) - 1) /
        static_cast<std::size_t>(pooled ? half : config.batch_size));

    // merged dataset indexed as: [0, src_train) source, then target
    Dataset merged = src_train;
    const std::size_t tgt_offset = merged.size();
    merged.insert(merged.end(), tgt_train.begin(), tgt_train.end());

    TrainResult result;
    std::vector<net::Mat<Scalar>> best_snapshot = detail::snapshot_values(model);
    int since_best = 0;
    int start_epoch = 0;
    if (state && state->next_epoch > 0) {
        start_epoch = state->next_epoch;
        since_best = state->since_best;
        result.best_val_acc = state->best_val_acc;
        result.best_epoch = state->best_epoch;
        rng.set_state(state->rng_state);
        if (!state->best_values.empty()) best_snapshot = state->best_values;
    }
    bool paused = false;
    for (int epoch = start_epoch; epoch < config.max_epochs; ++epoch) {
        const double lr = config.learning_rate(epoch);
        const double lambda_adv =
            adversarial
                ? lambda_schedule(static_cast<double>(epoch) / config.max_epochs, config.gamma)
                : 0.0;
        double sum_cls = 0.0, sum_dom = 0.0, sum_align = 0.0;
        int live_steps = 0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            std::vector<SequenceRef> picks;
            if (pooled) {
                for (int i = 0; i < half; ++i) {
                    auto ref = src_seqs[static_cast<std::size_t>(rng.uniform_int(src_seqs.size()))];
                    picks.push_back(ref);
                }
                for (int i = 0; i < config.batch_size - half; ++i) {
                    auto ref = tgt_seqs[static_cast<std::size_t>(rng.uniform_int(tgt_seqs.size()))];
                    ref.night += tgt_offset;
                    picks.push_back(ref);
                }
            } else {
                for (int i = 0; i < config.batch_size; ++i) {
                    auto ref = tgt_seqs[static_cast<std::size_t>(rng.uniform_int(tgt_seqs.size()))];
                    ref.night += tgt_offset;
                    picks.push_back(ref);
                }
            }
            auto batch = make_batch<Scalar>(merged, picks, config.l_seq, config.net.epoch_samples);
            LossReport report;
            if (adversarial) {
                report = train_step(model, opt_fc, opt_d, batch, weights, lambda_adv,
                                    config.lambda_align, config.margin, lr, rng);
            } else {
                report = supervised_step(model, opt_fc, batch, weights, lr, rng);
            }
            if (report.aborted) {
                ++result.aborted_steps;
                continue;
            }
            sum_cls += report.l_cls;
            sum_dom += report.l_dom;
            sum_align += report.l_align;
            ++live_steps;
        }
        if (live_steps == 0)
            throw Error("run_training: every step in epoch " + std::to_string(epoch) +
                        " aborted on non-finite losses");

        const double val_acc = detail::evaluate_accuracy(model, val_nights, config.l_seq);
        HistoryRow row;
        row.epoch = epoch;
        row.l_cls = sum_cls / live_steps;
        row.l_dom = sum_dom / live_steps;
        row.l_align = sum_align / live_steps;
        row.lambda_adv = lambda_adv;
        row.lr = lr;
        row.val_acc = val_acc;
        result.history.push_back(row);
        result.epochs_run = epoch + 1;

        if (val_acc > result.best_val_acc) {
            result.best_val_acc = val_acc;
            result.best_epoch = epoch;
            best_snapshot = detail::snapshot_values(model);
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= config.patience) break;
        }
        if (pause_after > 0 && epoch + 1 >= pause_after && epoch + 1 < config.max_epochs) {
            paused = true;
            ++epoch;
            if (state) state->next_epoch = epoch;
            break;
        }
    }
    if (state) {
        state->since_best = since_best;
        state->best_val_acc = result.best_val_acc;
        state->best_epoch = result.best_epoch;
        state->rng_state = rng.state();
        state->best_values = best_snapshot;
        if (!paused) state->next_epoch = result.epochs_run;
    }
    if (!paused) detail::restore_values(model, best_snapshot);
    return result;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldPlan {
    std::vector<std::vector<std::string>> folds;  // subject ids per fold

    void validate(std::size_t cohort_subjects) const {
        std::set<std::string> seen;
        std::size_t total = 0;
        for (const auto& fold : folds) {
            for (const auto& s : fold) {
                if (!seen.insert(s).second) throw FoldError("fold plan: subject in two folds");
                ++total;
            }
        }
        if (total != cohort_subjects) throw FoldError("fold plan: folds do not cover the cohort");
    }
};

/// Subject-disjoint folds with sizes differing by at most one.
inline FoldPlan make_fold_plan(const Dataset& cohort, int k, std::uint64_t seed) {
    std::set<std::string> subject_set;
    for (const auto& n : cohort) subject_set.insert(n.subject_id);
    if (subject_set.size() < static_cast<std::size_t>(k))
        throw FoldError("make_fold_plan: need at least " + std::to_string(k) + " subjects");
    std::vector<std::string> subjects(subject_set.begin(), subject_set.end());
    Rng rng(seed ^ 0x666f6c64ULL);
    rng.shuffle(subjects);
    FoldPlan plan;
    plan.folds.resize(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < subjects.size(); ++i)
        plan.folds[i % static_cast<std::size_t>(k)].push_back(subjects[i]);
    plan.validate(subjects.size());
    return plan;
}

struct FoldOutcome {
    metrics::AgreementReport pooled;                     // confusion pooled over test nights
    std::vector<metrics::AgreementReport> night_reports;
    TrainResult training;
};

struct CvResult {
    std::vector<FoldOutcome> folds;
    double mean_accuracy = 0.0;
    double sd_accuracy = 0.0;
    double mean_kappa = 0.0;
    std::array<double, 4> mean_f1{};
    std::array<double, 4> sd_f1{};
};

namespace detail {

inline metrics::AgreementReport pool_reports(const std::vector<metrics::AgreementReport>& reports) {
    metrics::AgreementReport pooled;
    for (const auto& r : reports) {
        pooled.epochs += r.epochs;
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                pooled.confusion[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] +=
                    r.confusion[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    }
    const auto total = static_cast<double>(pooled.epochs);
    if (total == 0.0) return pooled;
    std::size_t agree = 0;
    double expected = 0.0;
    for (int c = 0; c < 4; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        agree += pooled.confusion[ci][ci];
        std::size_t ref_count = 0, pred_count = 0;
        for (int k = 0; k < 4; ++k) {
            ref_count += pooled.confusion[ci][static_cast<std::size_t>(k)];
            pred_count += pooled.confusion[static_cast<std::size_t>(k)][ci];
        }
        const std::size_t tp = pooled.confusion[ci][ci];
        const double denom = static_cast<double>(ref_count + pred_count);
        pooled.f1[ci] = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 1.0;
        expected += (static_cast<double>(ref_count) / total) *
                    (static_cast<double>(pred_count) / total);
    }
    pooled.accuracy = static_cast<double>(agree) / total;
    pooled.kappa = expected < 1.0 ? (pooled.accuracy - expected) / (1.0 - expected) : 1.0;
    return pooled;
}

}  // namespace detail

/// Stages one night with the ensemble decision scheme and scores it against
/// the reference labels.
template <class Scalar>
metrics::AgreementReport evaluate_night(net::StagingModel<Scalar>& model, const NightRecord& night,
                                        int l_seq) {
    infer::NightInput input;
    input.respiration = night.respiration;
    input.activity = night.activity;
    auto ens = infer::sliding_predict(input, model, l_seq);
    auto staged = infer::stage_night(ens);
    auto hyp = infer::emit_hypnogram(staged, 0, staged.size());
    metrics::Hypnogram ref;
    ref.stages.resize(night.epochs());
    for (std::size_t e = 0; e < ref.stages.size(); ++e)
        ref.stages[e] = static_cast<Stage>(night.labels[e]);
    ref.lights_off = 0;
    ref.lights_on = ref.stages.size();
    hyp.stages.resize(ref.stages.size());
    return metrics::agreement(hyp, ref);
}

/// Subject-disjoint k-fold cross-validation over the target cohort; the
/// source cohort (when the strategy uses one) is training-only.
template <class Scalar>
CvResult run_cross_validation(const Dataset& source, const Dataset& target,
                              const TrainConfig& config, int k_folds = 5) {
    auto plan = make_fold_plan(target, k_folds, config.seed);
    CvResult result;
    std::vector<double> accs;
    std::array<std::vector<double>, 4> f1s;
    for (const auto& fold_subjects : plan.folds) {
        std::set<std::string> test_set(fold_subjects.begin(), fold_subjects.end());
        Dataset tgt_train, tgt_test;
        for (const auto& n : target) {
            if (test_set.count(n.subject_id)) {
                if (config.strategy != Strategy::CrossPositionDa || n.position == "overhead")
                    tgt_test.push_back(n);
            } else {
                tgt_train.push_back(n);
            }
        }
        if (tgt_test.empty()) throw FoldError("run_cross_validation: empty test fold");

        net::StagingModel<Scalar> model(config.net, config.seed);
        Adam<Scalar> opt_fc, opt_d;
        auto fc_params = model.extractor_params();
        auto c_params = model.classifier_params();
        fc_params.insert(fc_params.end(), c_params.begin(), c_params.end());
        opt_fc.attach(fc_params);
        opt_d.attach(model.discriminator_params());

        FoldOutcome outcome;
        outcome.training = run_training(model, opt_fc, opt_d, source, tgt_train, config);
        for (const auto& night : tgt_test)
            outcome.night_reports.push_back(evaluate_night(model, night, config.l_seq));
        outcome.pooled = detail::pool_reports(outcome.night_reports);
        accs.push_back(outcome.pooled.accuracy);
        for (int c = 0; c < 4; ++c)
            f1s[static_cast<std::size_t>(c)].push_back(outcome.pooled.f1[static_cast<std::size_t>(c)]);
        result.mean_kappa += outcome.pooled.kappa;
        result.folds.push_back(std::move(outcome));
    }
    result.mean_accuracy = mean_of(accs);
    result.sd_accuracy = sample_stddev_of(accs);
    result.mean_kappa /= static_cast<double>(result.folds.size());
    for (int c = 0; c < 4; ++c) {
        result.mean_f1[static_cast<std::size_t>(c)] = mean_of(f1s[static_cast<std::size_t>(c)]);
        result.sd_f1[static_cast<std::size_t>(c)] = sample_stddev_of(f1s[static_cast<std::size_t>(c)]);
    }
    return result;
}

}  // namespace somnoradar::train
