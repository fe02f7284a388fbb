#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "somnoradar/checkpoint.hpp"
#include "somnoradar/losses.hpp"
#include "somnoradar/net.hpp"
#include "test_support.hpp"

using namespace somnoradar;
using Catch::Approx;

namespace {

// frozen registry sizes for the default and width-reduced configurations
constexpr std::size_t kDefaultParameterCount = 1496233;
constexpr std::size_t kToyParameterCount = 95857;

net::NetConfig tiny_config() {
    net::NetConfig cfg;
    cfg.block_channels = {8, 8, 8, 8, 8, 8};
    cfg.lstm_hidden = 8;
    cfg.attention_dim = 8;
    cfg.head_hidden = 8;
    return cfg;
}

net::SeqBatch<double> random_batch(int b, int l, int epoch_samples, std::uint64_t seed) {
    net::SeqBatch<double> batch;
    batch.batch = b;
    batch.len = l;
    Rng rng(seed);
    const auto cols = static_cast<Eigen::Index>(b) * l * epoch_samples;
    batch.respiration.resize(1, cols);
    batch.activity.resize(1, cols);
    for (Eigen::Index i = 0; i < cols; ++i) {
        batch.respiration(0, i) = rng.normal();
        batch.activity(0, i) = rng.normal();
    }
    for (int i = 0; i < b * l; ++i) {
        batch.labels.push_back(static_cast<int>(rng.uniform_int(4)));
        batch.domains.push_back(static_cast<int>(rng.uniform_int(2)));
    }
    // ensure every class and both domains occur
    for (int c = 0; c < 4; ++c) batch.labels[static_cast<std::size_t>(c) % batch.labels.size()] = c;
    batch.domains[0] = 0;
    batch.domains[1] = 1;
    return batch;
}

/// Scalar objective L_cls - lambda_adv * L_dom + lambda_align * L_align in
/// frozen-statistics mode.
double eval_objective(net::StagingModel<double>& model, const net::SeqBatch<double>& batch,
                      const std::array<double, 4>& weights,
                      const train::AlignmentPairing& pairing, double lambda_adv,
                      double lambda_align, double margin) {
    auto z = model.extract(batch, net::Mode::Eval);
    auto logits = model.classify_logits(z);
    auto probs = net::softmax_columns(logits);
    auto cls = train::classification_loss(probs, batch.labels, weights);
    auto d_logits = model.discriminate_logits(z);
    std::vector<double> d_probs;
    for (Eigen::Index c = 0; c < d_logits.cols(); ++c)
        d_probs.push_back(net::detail::sigmoid(d_logits(0, c)));
    auto dom = train::domain_loss(d_probs, batch.domains);
    auto align = train::alignment_loss(z, batch.labels, batch.domains, margin, pairing);
    return cls.value - lambda_adv * dom.value + lambda_align * align.value;
}

/// Analytic gradients of the same objective, accumulated into param grads.
void backward_objective(net::StagingModel<double>& model, const net::SeqBatch<double>& batch,
                        const std::array<double, 4>& weights,
                        const train::AlignmentPairing& pairing, double lambda_adv,
                        double lambda_align, double margin) {
    auto z = model.extract(batch, net::Mode::Eval);
    auto logits = model.classify_logits(z);
    net::Mat<double> dlogits;
    train::classification_loss_grad(logits, batch.labels, weights, &dlogits);
    auto d_logits = model.discriminate_logits(z);
    net::Mat<double> ddisc;
    train::domain_loss_grad(d_logits, batch.domains, &ddisc);
    net::Mat<double> dz_align;
    train::alignment_loss(z, batch.labels, batch.domains, margin, pairing, &dz_align);

    model.zero_grads();
    net::Mat<double> dz = model.classifier_backward(dlogits);
    // -lambda_adv * L_dom: scale the upstream so the discriminator's own
    // parameters receive the objective gradient too
    net::Mat<double> ddisc_scaled = net::gradient_reversal_backward(ddisc, lambda_adv);
    dz += model.discriminator_backward(ddisc_scaled);
    dz += dz_align * lambda_align;
    model.extract_backward(dz);
}

}  // namespace

TEST_CASE("extractor output shape and determinism", "[net]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 11);
    auto batch = random_batch(2, 4, cfg.epoch_samples, 5);
    auto z1 = model.extract(batch, net::Mode::Eval);
    REQUIRE(z1.rows() == cfg.feature_dim());
    REQUIRE(z1.cols() == 8);
    auto z2 = model.extract(batch, net::Mode::Eval);
    REQUIRE((z1 - z2).cwiseAbs().maxCoeff() == 0.0);  // bit-identical
}

TEST_CASE("same seed gives identical models", "[net][determinism]") {
    auto cfg = tiny_config();
    net::StagingModel<double> a(cfg, 99), b(cfg, 99);
    auto pa = a.all_params();
    auto pb = b.all_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->name == pb[i]->name);
        REQUIRE(pa[i]->value == pb[i]->value);
    }
}

TEST_CASE("classifier posteriors form a simplex", "[net]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 3);
    auto batch = random_batch(2, 4, cfg.epoch_samples, 7);
    auto z = model.extract(batch, net::Mode::Eval);
    auto probs = net::softmax_columns(model.classify_logits(z));
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        REQUIRE(probs.col(c).sum() == Approx(1.0).margin(1e-6));
        for (int r = 0; r < 4; ++r) {
            REQUIRE(probs(r, c) >= 0.0);
            REQUIRE(probs(r, c) <= 1.0);
        }
    }
}

TEST_CASE("zero classifier parameters give the uniform posterior", "[net]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 3);
    for (auto* p : model.classifier_params()) p->value.setZero();
    auto batch = random_batch(1, 4, cfg.epoch_samples, 9);
    auto z = model.extract(batch, net::Mode::Eval);
    auto probs = net::softmax_columns(model.classify_logits(z));
    for (Eigen::Index c = 0; c < probs.cols(); ++c)
        for (int r = 0; r < 4; ++r) REQUIRE(probs(r, c) == Approx(0.25).margin(1e-12));
}

TEST_CASE("softmax arithmetic on a dominant logit", "[net]") {
    net::Mat<double> logits(4, 1);
    logits << 10.0, 0.0, 0.0, 0.0;
    auto probs = net::softmax_columns(logits);
    REQUIRE(probs(0, 0) > 0.999);
    Eigen::Index best;
    probs.col(0).maxCoeff(&best);
    REQUIRE(best == 0);  // W
}

TEST_CASE("discriminator sigmoid behavior", "[net]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 3);
    for (auto* p : model.discriminator_params()) p->value.setZero();
    auto batch = random_batch(1, 4, cfg.epoch_samples, 13);
    auto z = model.extract(batch, net::Mode::Eval);
    auto d = model.discriminate_logits(z);
    for (Eigen::Index c = 0; c < d.cols(); ++c)
        REQUIRE(net::detail::sigmoid(d(0, c)) == Approx(0.5).margin(1e-12));
    REQUIRE(net::detail::sigmoid(10.0) > 0.9999);
    REQUIRE(net::detail::sigmoid(-10.0) < 1e-4);
    // random features give a finite value strictly inside (0,1)
    net::StagingModel<double> rnd(cfg, 4);
    auto z2 = rnd.extract(batch, net::Mode::Eval);
    auto d2 = rnd.discriminate_logits(z2);
    for (Eigen::Index c = 0; c < d2.cols(); ++c) {
        double v = net::detail::sigmoid(d2(0, c));
        REQUIRE(std::isfinite(v));
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
    }
}

TEST_CASE("attention weights are positive and sum to one", "[net]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 21);
    auto batch = random_batch(3, 8, cfg.epoch_samples, 17);
    model.extract(batch, net::Mode::Eval);
    const auto& w = model.attention_weights();
    REQUIRE(w.rows() == 3);
    REQUIRE(w.cols() == 8);
    for (Eigen::Index b = 0; b < w.rows(); ++b) {
        REQUIRE(w.row(b).sum() == Approx(1.0).margin(1e-6));
        for (Eigen::Index t = 0; t < w.cols(); ++t) REQUIRE(w(b, t) > 0.0);
    }
}

TEST_CASE("gradient reversal layer semantics", "[net][grl]") {
    net::Mat<double> g(3, 2);
    g << 1.0, -2.0, 0.5, 4.0, -1.5, 3.0;
    REQUIRE(net::gradient_reversal_forward(g) == g);
    auto zero = net::gradient_reversal_backward(g, 0.0);
    REQUIRE(zero.cwiseAbs().maxCoeff() == 0.0);
    auto neg = net::gradient_reversal_backward(g, 1.0);
    REQUIRE(neg == (-g).eval());
    auto scaled = net::gradient_reversal_backward(g, 0.25);
    REQUIRE(scaled == (-0.25 * g).eval());
}

TEST_CASE("cnn tower keeps epochs separate before the recurrent stage", "[net]") {
    auto cfg = tiny_config();
    Rng rng(31);
    net::CnnTower<double> tower;
    tower.init("probe", cfg, rng);
    const int n_items = 6;
    net::Mat<double> x(1, n_items * cfg.epoch_samples);
    Rng data_rng(7);
    for (Eigen::Index i = 0; i < x.cols(); ++i) x(0, i) = data_rng.normal();
    auto base = tower.forward(x, n_items, net::Mode::Eval);

    net::Mat<double> perturbed = x;
    const int target_item = 3;
    perturbed(0, target_item * cfg.epoch_samples + 150) += 0.5;
    auto out = tower.forward(perturbed, n_items, net::Mode::Eval);
    for (int n = 0; n < n_items; ++n) {
        double delta = (out.col(n) - base.col(n)).cwiseAbs().maxCoeff();
        if (n == target_item)
            REQUIRE(delta > 0.0);
        else
            REQUIRE(delta == 0.0);
    }
}

TEST_CASE("parameter count is stable and matches the frozen registry", "[net]") {
    net::NetConfig def;  // paper-scale configuration
    net::StagingModel<float> a(def, 1), b(def, 2);
    REQUIRE(a.parameter_count() == b.parameter_count());
    // frozen registry size for the default architecture
    REQUIRE(a.parameter_count() == kDefaultParameterCount);

    net::StagingModel<float> toy(net::NetConfig::toy(), 1);
    REQUIRE(toy.parameter_count() == kToyParameterCount);
}

TEST_CASE("analytic gradients match central finite differences", "[net][gradcheck]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 77);
    auto batch = random_batch(2, 4, cfg.epoch_samples, 23);
    auto weights = train::class_weights(batch.labels);
    Rng pair_rng(41);
    auto pairing = train::sample_alignment_pairs(batch.labels, batch.domains, pair_rng);
    REQUIRE_FALSE(pairing.pairs.empty());
    const double lambda_adv = 0.7, lambda_align = 0.1, margin = 1.0;

    backward_objective(model, batch, weights, pairing, lambda_adv, lambda_align, margin);

    auto params = model.all_params();
    Rng pick(101);
    int checked = 0;
    double worst = 0.0;
    while (checked < 24) {
        auto* p = params[static_cast<std::size_t>(pick.uniform_int(params.size()))];
        Eigen::Index idx = static_cast<Eigen::Index>(pick.uniform_int(
            static_cast<std::uint64_t>(p->value.size())));
        const double theta = p->value.data()[idx];
        const double analytic = p->grad.data()[idx];
        // a small ladder of steps: large h can straddle a leaky-rectifier
        // kink, tiny h hits FD roundoff; the gradient is right if any valid
        // step size agrees
        double rel = 1e9, numeric = 0.0;
        for (double scale : {1e-5, 1e-6, 1e-7}) {
            const double h = scale * std::max(1.0, std::abs(theta));
            p->value.data()[idx] = theta + h;
            double plus = eval_objective(model, batch, weights, pairing, lambda_adv, lambda_align,
                                         margin);
            p->value.data()[idx] = theta - h;
            double minus = eval_objective(model, batch, weights, pairing, lambda_adv,
                                          lambda_align, margin);
            p->value.data()[idx] = theta;
            const double num = (plus - minus) / (2.0 * h);
            const double denom = std::max({std::abs(analytic), std::abs(num), 1e-12});
            const double r = std::abs(analytic - num) / denom;
            if (r < rel) {
                rel = r;
                numeric = num;
            }
            if (rel <= 1e-6) break;
        }
        const bool pass = rel <= 1e-4 || std::abs(analytic - numeric) <= 1e-10;
        INFO(p->name << "[" << idx << "] analytic=" << analytic << " numeric=" << numeric
                     << " rel=" << rel);
        REQUIRE(pass);
        worst = std::max(worst, rel);
        ++checked;
    }
    INFO("worst relative error " << worst);
    REQUIRE(checked >= 20);
}

TEST_CASE("grl composite derivative matches finite differences", "[net][grl]") {
    // f(GRL(x)) with f = sum of squares; d/dx of the "training" objective
    // -lambda * f must equal -lambda * 2x
    net::Mat<double> x(3, 2);
    x << 0.3, -1.2, 0.8, 0.1, -0.4, 2.0;
    const double lambda = 0.6;
    auto fwd = net::gradient_reversal_forward(x);
    net::Mat<double> df = 2.0 * fwd;  // upstream d f / d(GRL output)
    auto dx = net::gradient_reversal_backward(df, lambda);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = 1e-7;
        net::Mat<double> xp = x, xm = x;
        xp.data()[i] += h;
        xm.data()[i] -= h;
        double fp = -lambda * net::gradient_reversal_forward(xp).squaredNorm();
        double fm = -lambda * net::gradient_reversal_forward(xm).squaredNorm();
        double numeric = (fp - fm) / (2.0 * h);
        REQUIRE(dx.data()[i] == Approx(numeric).epsilon(1e-5));
    }
}

TEST_CASE("checkpoint round trip is bit exact", "[net][checkpoint]") {
    auto cfg = tiny_config();
    net::StagingModel<double> model(cfg, 55);
    train::Adam<double> opt_fc, opt_d;
    auto fc = model.extractor_params();
    auto cp = model.classifier_params();
    fc.insert(fc.end(), cp.begin(), cp.end());
    opt_fc.attach(fc);
    opt_d.attach(model.discriminator_params());

    // take one training step so optimizer state and BN buffers are nontrivial
    auto batch = random_batch(2, 4, cfg.epoch_samples, 3);
    auto weights = train::class_weights(batch.labels);
    Rng rng(5);
    train::train_step(model, opt_fc, opt_d, batch, weights, 0.5, 0.1, 1.0, 1e-3, rng);

    const std::string path = "/tmp/somnoradar_ckpt_test.bin";
    auto ckpt = ckpt::make_checkpoint(model, &opt_fc, &opt_d);
    ckpt::write_checkpoint(ckpt, path);

    auto loaded = ckpt::read_checkpoint(path);
    auto restored = ckpt::model_from_checkpoint<double>(loaded);
    auto pa = model.all_params();
    auto pb = restored->all_params();
    for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i]->value == pb[i]->value);
    auto ba = model.buffers();
    auto bb = restored->buffers();
    for (std::size_t i = 0; i < ba.size(); ++i) REQUIRE(ba[i]->value == bb[i]->value);

    // identical forward bits
    auto z1 = model.extract(batch, net::Mode::Eval);
    auto z2 = restored->extract(batch, net::Mode::Eval);
    REQUIRE(z1 == z2);

    // re-serialization reproduces the identical file
    const std::string path2 = "/tmp/somnoradar_ckpt_test2.bin";
    ckpt::write_checkpoint(loaded, path2);
    REQUIRE(ckpt::file_checksum(path) == ckpt::file_checksum(path2));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("modality masking zeroes the activity path", "[net]") {
    auto cfg = tiny_config();
    cfg.use_activity = false;
    net::StagingModel<double> model(cfg, 5);
    auto batch = random_batch(1, 4, cfg.epoch_samples, 3);
    auto z1 = model.extract(batch, net::Mode::Eval);
    auto batch2 = batch;
    for (Eigen::Index i = 0; i < batch2.activity.cols(); ++i) batch2.activity(0, i) += 10.0;
    auto z2 = model.extract(batch2, net::Mode::Eval);
    REQUIRE(z1 == z2);  // activity cannot influence the features when masked
}
