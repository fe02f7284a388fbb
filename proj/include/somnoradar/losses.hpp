#pragma once

// The three-loss domain-adversarial objective: class-weighted cross-entropy,
// discriminator binary cross-entropy with per-domain means, the label-aware
// contrastive alignment term, plus class weighting and the adversarial
// weight ramp. Each loss has a probability-surface form (used by tests and
// reporting) and a fused logit form returning gradients (used by training).

#include <array>
#include <cmath>
#include <vector>

#include "somnoradar/common.hpp"
#include "somnoradar/net.hpp"

namespace somnoradar::train {

inline constexpr double kProbFloor = 1e-12;

// ---------------------------------------------------------------------------
// Class weights
// ---------------------------------------------------------------------------

/// w_c = N / (4 * n_c); requires every class present.
inline std::array<double, 4> class_weights(const std::vector<int>& labels) {
    std::array<double, 4> counts{0, 0, 0, 0};
    for (int label : labels) {
        if (label < 0 || label >= kNumStages) throw ParameterError("class_weights: bad label");
        counts[static_cast<std::size_t>(label)] += 1.0;
    }
    std::array<double, 4> weights{};
    const auto n = static_cast<double>(labels.size());
    for (int c = 0; c < kNumStages; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0.0)
            throw WeightError("class_weights: class " + std::string(stage_name(static_cast<Stage>(c))) +
                              " absent");
        weights[static_cast<std::size_t>(c)] = n / (4.0 * counts[static_cast<std::size_t>(c)]);
    }
    return weights;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

struct LossValue {
    double value = 0.0;
    bool flagged = false;  // clamped probability / missing domain / no pairs
};

/// Probability-surface form: -mean_i sum_c w_c y_i^c log p_i^c with the
/// posterior floored at 1e-12 (flagged when the floor engages).
template <class Scalar>
LossValue classification_loss(const net::Mat<Scalar>& posteriors, const std::vector<int>& labels,
                              const std::array<double, 4>& weights) {
    if (posteriors.cols() != static_cast<Eigen::Index>(labels.size()))
        throw ShapeError("classification_loss: posterior/label count mismatch");
    LossValue out;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < posteriors.cols(); ++i) {
        double p = static_cast<double>(posteriors(labels[static_cast<std::size_t>(i)], i));
        if (p < kProbFloor) {
            p = kProbFloor;
            out.flagged = true;
        }
        acc -= weights[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] * std::log(p);
    }
    out.value = acc / static_cast<double>(posteriors.cols());
    return out;
}

/// Fused softmax + cross-entropy on logits; returns d(loss)/d(logits).
template <class Scalar>
LossValue classification_loss_grad(const net::Mat<Scalar>& logits, const std::vector<int>& labels,
                                   const std::array<double, 4>& weights,
                                   net::Mat<Scalar>* dlogits) {
    const auto n = static_cast<double>(logits.cols());
    net::Mat<Scalar> probs = net::softmax_columns(logits);
    LossValue out;
    double acc = 0.0;
    dlogits->resizeLike(logits);
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        const double w = weights[static_cast<std::size_t>(y)];
        double p = std::max(static_cast<double>(probs(y, i)), kProbFloor);
        acc -= w * std::log(p);
        for (int c = 0; c < kNumStages; ++c) {
            double grad = w * (static_cast<double>(probs(c, i)) - (c == y ? 1.0 : 0.0)) / n;
            (*dlogits)(c, i) = static_cast<Scalar>(grad);
        }
    }
    out.value = acc / n;
    return out;
}

// ---------------------------------------------------------------------------
// Domain loss
// ---------------------------------------------------------------------------

/// -E_source log(1 - d) - E_target log(d), expectations as batch means over
/// each domain's members. A batch missing one domain computes the present
/// term only and flags it.
inline LossValue domain_loss(const std::vector<double>& d_probs, const std::vector<int>& domains) {
    if (d_probs.size() != domains.size())
        throw ShapeError("domain_loss: probability/domain count mismatch");
    double src_acc = 0.0, tgt_acc = 0.0;
    std::size_t n_src = 0, n_tgt = 0;
    for (std::size_t i = 0; i < d_probs.size(); ++i) {
        double d = std::min(1.0 - kProbFloor, std::max(kProbFloor, d_probs[i]));
        if (domains[i] == 0) {
            src_acc -= std::log(1.0 - d);
            ++n_src;
        } else {
            tgt_acc -= std::log(d);
            ++n_tgt;
        }
    }
    LossValue out;
    out.flagged = (n_src == 0 || n_tgt == 0);
    if (n_src) out.value += src_acc / static_cast<double>(n_src);
    if (n_tgt) out.value += tgt_acc / static_cast<double>(n_tgt);
    return out;
}

/// Fused sigmoid + BCE on the discriminator logit row; returns
/// d(loss)/d(logits).
template <class Scalar>
LossValue domain_loss_grad(const net::Mat<Scalar>& logits, const std::vector<int>& domains,
                           net::Mat<Scalar>* dlogits) {
    const auto n = static_cast<std::size_t>(logits.cols());
    std::size_t n_src = 0, n_tgt = 0;
    for (std::size_t i = 0; i < n; ++i) (domains[i] == 0 ? n_src : n_tgt) += 1;
    LossValue out;
    out.flagged = (n_src == 0 || n_tgt == 0);
    dlogits->setZero(1, logits.cols());
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = static_cast<double>(logits(0, static_cast<Eigen::Index>(i)));
        const double d = net::detail::sigmoid(z);
        const double softplus_pos = (z > 30.0) ? z : std::log1p(std::exp(std::min(z, 30.0)));
        const double softplus_neg = (-z > 30.0) ? -z : std::log1p(std::exp(std::min(-z, 30.0)));
        if (domains[i] == 0 && n_src) {
            // -log(1 - sigmoid(z)) = softplus(z)
            acc += softplus_pos / static_cast<double>(n_src);
            (*dlogits)(0, static_cast<Eigen::Index>(i)) =
                static_cast<Scalar>(d / static_cast<double>(n_src));
        } else if (domains[i] == 1 && n_tgt) {
            // -log(sigmoid(z)) = softplus(-z)
            acc += softplus_neg / static_cast<double>(n_tgt);
            (*dlogits)(0, static_cast<Eigen::Index>(i)) =
                static_cast<Scalar>(-(1.0 - d) / static_cast<double>(n_tgt));
        }
    }
    out.value = acc;
    return out;
}

// ---------------------------------------------------------------------------
// Label-aware alignment loss
// ---------------------------------------------------------------------------

struct AlignmentPairing {
    std::vector<std::pair<int, int>> pairs;  // (source index, target index)
    bool flagged = false;                    // no cross-domain pair available
};

inline constexpr int kMaxAlignmentPairs = 64;

/// Samples up to kMaxAlignmentPairs cross-domain pairs, stratified by class:
/// every class present in both domains contributes pull pairs; the remainder
/// of the budget is filled with push (different-class) pairs.
inline AlignmentPairing sample_alignment_pairs(const std::vector<int>& labels,
                                               const std::vector<int>& domains, Rng& rng) {
    std::array<std::vector<int>, 4> src_by_class, tgt_by_class;
    std::vector<int> src_all, tgt_all;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        auto c = static_cast<std::size_t>(labels[i]);
        if (domains[i] == 0) {
            src_by_class[c].push_back(static_cast<int>(i));
            src_all.push_back(static_cast<int>(i));
        } else {
            tgt_by_class[c].push_back(static_cast<int>(i));
            tgt_all.push_back(static_cast<int>(i));
        }
    }
    AlignmentPairing out;
    if (src_all.empty() || tgt_all.empty()) {
        out.flagged = true;
        return out;
    }
    int shared_classes = 0;
    for (int c = 0; c < 4; ++c)
        if (!src_by_class[static_cast<std::size_t>(c)].empty() &&
            !tgt_by_class[static_cast<std::size_t>(c)].empty())
            ++shared_classes;
    const int pull_budget = shared_classes > 0 ? kMaxAlignmentPairs / 2 : 0;
    if (shared_classes > 0) {
        const int per_class = std::max(1, pull_budget / shared_classes);
        for (int c = 0; c < 4; ++c) {
            const auto& src = src_by_class[static_cast<std::size_t>(c)];
            const auto& tgt = tgt_by_class[static_cast<std::size_t>(c)];
            if (src.empty() || tgt.empty()) continue;
            for (int k = 0; k < per_class; ++k) {
                int i = src[static_cast<std::size_t>(rng.uniform_int(src.size()))];
                int j = tgt[static_cast<std::size_t>(rng.uniform_int(tgt.size()))];
                out.pairs.emplace_back(i, j);
            }
        }
    }
    const int push_budget = kMaxAlignmentPairs - static_cast<int>(out.pairs.size());
    int attempts = 0;
    int pushed = 0;
    while (pushed < push_budget && attempts < 8 * push_budget) {
        ++attempts;
        int i = src_all[static_cast<std::size_t>(rng.uniform_int(src_all.size()))];
        int j = tgt_all[static_cast<std::size_t>(rng.uniform_int(tgt_all.size()))];
        if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) continue;
        out.pairs.emplace_back(i, j);
        ++pushed;
    }
    if (out.pairs.empty()) out.flagged = true;
    return out;
}

/// Mean over sampled cross-domain pairs of ||z_i - z_j||^2 for same-class
/// pairs and hinge(m - ||z_i - z_j||)^2 otherwise. Features are
/// L2-normalized inside the loss only; gradients flow through the
/// normalization. Returns d(loss)/d(features) via *dz when non-null.
template <class Scalar>
LossValue alignment_loss(const net::Mat<Scalar>& features, const std::vector<int>& labels,
                         const std::vector<int>& domains, double margin,
                         const AlignmentPairing& pairing, net::Mat<Scalar>* dz = nullptr) {
    (void)domains;
    LossValue out;
    if (dz) dz->setZero(features.rows(), features.cols());
    if (pairing.pairs.empty()) {
        out.flagged = true;
        return out;
    }
    const auto dim = features.rows();
    const double inv_pairs = 1.0 / static_cast<double>(pairing.pairs.size());
    net::Vec<Scalar> zi_hat(dim), zj_hat(dim), diff(dim), gi(dim), gj(dim);
    double acc = 0.0;
    for (const auto& [i, j] : pairing.pairs) {
        const auto ci = static_cast<Eigen::Index>(i);
        const auto cj = static_cast<Eigen::Index>(j);
        const double ni = std::max(1e-12, static_cast<double>(features.col(ci).norm()));
        const double nj = std::max(1e-12, static_cast<double>(features.col(cj).norm()));
        zi_hat = features.col(ci) / static_cast<Scalar>(ni);
        zj_hat = features.col(cj) / static_cast<Scalar>(nj);
        diff = zi_hat - zj_hat;
        const double dist2 = static_cast<double>(diff.squaredNorm());
        const double dist = std::sqrt(std::max(dist2, 1e-24));
        const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
        double dcoef = 0.0;  // d(loss_pair)/d(diff) = dcoef * diff
        if (same) {
            acc += dist2;
            dcoef = 2.0;
        } else {
            const double hinge = margin - dist;
            if (hinge > 0.0) {
                acc += hinge * hinge;
                dcoef = -2.0 * hinge / dist;
            }
        }
        if (dz && dcoef != 0.0) {
            // back through the normalization: d(z_hat)/dz = (I - z_hat z_hat^T)/||z||
            gi = diff * static_cast<Scalar>(dcoef * inv_pairs);
            gj = -gi;
            dz->col(ci) += (gi - zi_hat * zi_hat.dot(gi)) / static_cast<Scalar>(ni);
            dz->col(cj) += (gj - zj_hat * zj_hat.dot(gj)) / static_cast<Scalar>(nj);
        }
    }
    out.value = acc * inv_pairs;
    return out;
}

// ---------------------------------------------------------------------------
// Adversarial weight schedule
// ---------------------------------------------------------------------------

/// lambda_adv(p) = 2 / (1 + exp(-gamma p)) - 1 on training progress p.
inline double lambda_schedule(double progress, double gamma = 10.0) {
    if (progress < 0.0 || progress > 1.0)
        throw ParameterError("lambda_schedule: progress outside [0,1]");
    return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0;
}

}  // namespace somnoradar::train
