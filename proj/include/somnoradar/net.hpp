#pragma once

// The staging network: per-channel 1-D CNN towers of pre-activation
// bottleneck residual blocks, a linear projection to per-epoch features, a
// two-layer bidirectional LSTM with time-wise additive attention between the
// layers, a softmax stage classifier and a sigmoid domain discriminator
// behind a gradient-reversal layer. Forward and backward passes are written
// out by hand; gradient checks against central finite differences are part
// of the test suite.
//
// Batched layout: a batch of B sequences of L epochs is flattened to
// N = B*L items, item n = b*L + t. CNN stages process fat matrices of shape
// (channels x N*T).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "somnoradar/common.hpp"

namespace somnoradar::net {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct NetConfig {
    int epoch_samples = 300;
    std::array<int, 6> block_channels = {64, 64, 128, 128, 256, 256};
    std::array<int, 6> strides = {1, 2, 2, 2, 2, 2};
    std::array<int, 6> dilations = {1, 1, 2, 4, 8, 16};
    int bottleneck_divisor = 4;  // mid width = out width / divisor
    int lstm_hidden = 128;       // per direction; feature dim = 2 * hidden
    int attention_dim = 128;
    int head_hidden = 128;
    double dropout = 0.3;
    double leaky_slope = 0.01;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;
    bool use_activity = true;  // modality ablation: zero the activity tower input

    int feature_dim() const { return 2 * lstm_hidden; }

    /// Width-reduced configuration (4x) for CPU-budget experiments; the
    /// architecture shape (blocks, strides, dilations, depth) is unchanged.
    static NetConfig toy() {
        NetConfig c;
        c.block_channels = {16, 16, 32, 32, 64, 64};
        c.lstm_hidden = 32;
        c.attention_dim = 32;
        c.head_hidden = 32;
        return c;
    }

    void validate() const {
        if (epoch_samples < 8) throw ConfigError("net: epoch_samples too small");
        for (int c : block_channels)
            if (c < bottleneck_divisor) throw ConfigError("net: block width below divisor");
        if (lstm_hidden < 1 || attention_dim < 1 || head_hidden < 1)
            throw ConfigError("net: widths must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("net: dropout outside [0,1)");
    }
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
    j = {{"epoch_samples", c.epoch_samples}, {"block_channels", c.block_channels},
         {"strides", c.strides},             {"dilations", c.dilations},
         {"bottleneck_divisor", c.bottleneck_divisor},
         {"lstm_hidden", c.lstm_hidden},     {"attention_dim", c.attention_dim},
         {"head_hidden", c.head_hidden},     {"dropout", c.dropout},
         {"leaky_slope", c.leaky_slope},     {"bn_momentum", c.bn_momentum},
         {"bn_epsilon", c.bn_epsilon},       {"use_activity", c.use_activity}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
    j.at("epoch_samples").get_to(c.epoch_samples);
    j.at("block_channels").get_to(c.block_channels);
    j.at("strides").get_to(c.strides);
    j.at("dilations").get_to(c.dilations);
    j.at("bottleneck_divisor").get_to(c.bottleneck_divisor);
    j.at("lstm_hidden").get_to(c.lstm_hidden);
    j.at("attention_dim").get_to(c.attention_dim);
    j.at("head_hidden").get_to(c.head_hidden);
    j.at("dropout").get_to(c.dropout);
    j.at("leaky_slope").get_to(c.leaky_slope);
    j.at("bn_momentum").get_to(c.bn_momentum);
    j.at("bn_epsilon").get_to(c.bn_epsilon);
    j.at("use_activity").get_to(c.use_activity);
    c.validate();
}

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class Scalar>
struct Parameter {
    std::string name;
    Mat<Scalar> value;
    Mat<Scalar> grad;

    void init(const std::string& n, Eigen::Index rows, Eigen::Index cols) {
        name = n;
        value.setZero(rows, cols);
        grad.setZero(rows, cols);
    }
    Eigen::Index count() const { return value.size(); }
};

/// Named non-trainable state (batch-norm running statistics).
template <class Scalar>
struct Buffer {
    std::string name;
    Mat<Scalar> value;
};

namespace detail {

inline double uniform_symmetric(Rng& rng, double bound) { return rng.uniform(-bound, bound); }

template <class Scalar>
void fan_in_uniform(Mat<Scalar>& w, Eigen::Index fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            w(r, c) = static_cast<Scalar>(uniform_symmetric(rng, bound));
}

/// Orthogonal square matrix via Householder QR of a Gaussian draw.
inline Eigen::MatrixXd orthogonal(Eigen::Index n, Rng& rng) {
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index c = 0; c < n; ++c)
        for (Eigen::Index r = 0; r < n; ++r) g(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < n; ++i)
        if (r(i, i) < 0) q.col(i) = -q.col(i);
    return q;
}

template <class Scalar>
Scalar sigmoid(Scalar x) {
    if (x >= Scalar(0)) {
        Scalar e = std::exp(-x);
        return Scalar(1) / (Scalar(1) + e);
    }
    Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class Scalar>
class Conv1d {
  public:
    void init(const std::string& name, int in_ch, int out_ch, int kernel, int stride,
              int dilation, Rng& rng) {
        in_ch_ = in_ch;
        out_ch_ = out_ch;
        kernel_ = kernel;
        stride_ = stride;
        dilation_ = dilation;
        pad_ = dilation * (kernel - 1) / 2;
        w_.init(name + ".w", out_ch, in_ch * kernel);
        b_.init(name + ".b", out_ch, 1);
        detail::fan_in_uniform(w_.value, in_ch * kernel, rng);
    }

    int out_length(int t_in) const {
        return (t_in + 2 * pad_ - dilation_ * (kernel_ - 1) - 1) / stride_ + 1;
    }

    /// x: (in_ch x n_items*t_in) -> (out_ch x n_items*t_out)
    Mat<Scalar> forward(const Mat<Scalar>& x, int n_items) {
        n_items_ = n_items;
        t_in_ = static_cast<int>(x.cols()) / n_items;
        t_out_ = out_length(t_in_);
        cols_.setZero(in_ch_ * kernel_, static_cast<Eigen::Index>(n_items) * t_out_);
        for (int n = 0; n < n_items; ++n) {
            const Eigen::Index in_base = static_cast<Eigen::Index>(n) * t_in_;
            const Eigen::Index out_base = static_cast<Eigen::Index>(n) * t_out_;
            for (int t = 0; t < t_out_; ++t) {
                for (int j = 0; j < kernel_; ++j) {
                    int src = t * stride_ - pad_ + j * dilation_;
                    if (src < 0 || src >= t_in_) continue;
                    cols_.block(j * in_ch_, out_base + t, in_ch_, 1) = x.col(in_base + src);
                }
            }
        }
        Mat<Scalar> y = w_.value * cols_;
        y.colwise() += Vec<Scalar>(b_.value.col(0));
        return y;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        w_.grad.noalias() += dy * cols_.transpose();
        b_.grad.col(0).noalias() += dy.rowwise().sum();
        Mat<Scalar> dcols = w_.value.transpose() * dy;
        Mat<Scalar> dx;
        dx.setZero(in_ch_, static_cast<Eigen::Index>(n_items_) * t_in_);
        for (int n = 0; n < n_items_; ++n) {
            const Eigen::Index in_base = static_cast<Eigen::Index>(n) * t_in_;
            const Eigen::Index out_base = static_cast<Eigen::Index>(n) * t_out_;
            for (int t = 0; t < t_out_; ++t) {
                for (int j = 0; j < kernel_; ++j) {
                    int src = t * stride_ - pad_ + j * dilation_;
                    if (src < 0 || src >= t_in_) continue;
                    dx.col(in_base + src) += dcols.block(j * in_ch_, out_base + t, in_ch_, 1);
                }
            }
        }
        return dx;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        out->push_back(&w_);
        out->push_back(&b_);
    }

  private:
    Parameter<Scalar> w_, b_;
    Mat<Scalar> cols_;
    int in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1, dilation_ = 1, pad_ = 0;
    int n_items_ = 0, t_in_ = 0, t_out_ = 0;
};

template <class Scalar>
class BatchNorm1d {
  public:
    void init(const std::string& name, int channels, double momentum, double epsilon) {
        channels_ = channels;
        momentum_ = momentum;
        epsilon_ = epsilon;
        gamma_.init(name + ".gamma", channels, 1);
        beta_.init(name + ".beta", channels, 1);
        gamma_.value.setOnes();
        running_mean_.name = name + ".running_mean";
        running_mean_.value.setZero(channels, 1);
        running_var_.name = name + ".running_var";
        running_var_.value.setOnes(channels, 1);
    }

    Mat<Scalar> forward(const Mat<Scalar>& x, Mode mode) {
        mode_ = mode;
        Vec<Scalar> mean, var;
        if (mode == Mode::Train) {
            mean = x.rowwise().mean();
            Mat<Scalar> centered = x.colwise() - mean;
            var = centered.array().square().matrix().rowwise().mean();
            running_mean_.value = ((1.0 - momentum_) * running_mean_.value.template cast<double>() +
                                   momentum_ * mean.template cast<double>())
                                      .template cast<Scalar>();
            running_var_.value = ((1.0 - momentum_) * running_var_.value.template cast<double>() +
                                  momentum_ * var.template cast<double>())
                                     .template cast<Scalar>();
        } else {
            mean = running_mean_.value.col(0);
            var = running_var_.value.col(0);
        }
        inv_std_ = (var.array() + static_cast<Scalar>(epsilon_)).rsqrt().matrix();
        xhat_ = (x.colwise() - mean).array().colwise() * inv_std_.col(0).array();
        Mat<Scalar> y = xhat_.array().colwise() * gamma_.value.col(0).array();
        y.colwise() += Vec<Scalar>(beta_.value.col(0));
        return y;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        gamma_.grad.col(0).noalias() += (dy.array() * xhat_.array()).matrix().rowwise().sum();
        beta_.grad.col(0).noalias() += dy.rowwise().sum();
        const auto scale = (gamma_.value.col(0).array() * inv_std_.col(0).array());
        if (mode_ == Mode::Eval) {
            return (dy.array().colwise() * scale).matrix();
        }
        const auto n = static_cast<Scalar>(dy.cols());
        Vec<Scalar> sum_dy = dy.rowwise().sum();
        Vec<Scalar> sum_dy_xhat = (dy.array() * xhat_.array()).matrix().rowwise().sum();
        Mat<Scalar> dx = n * dy.array().matrix();
        dx.colwise() -= sum_dy;
        dx.array() -= xhat_.array().colwise() * sum_dy_xhat.col(0).array();
        dx.array() = dx.array().colwise() * (scale / n);
        return dx;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        out->push_back(&gamma_);
        out->push_back(&beta_);
    }
    void collect_buffers(std::vector<Buffer<Scalar>*>* out) {
        out->push_back(&running_mean_);
        out->push_back(&running_var_);
    }

  private:
    Parameter<Scalar> gamma_, beta_;
    Buffer<Scalar> running_mean_, running_var_;
    Mat<Scalar> xhat_;
    Vec<Scalar> inv_std_;
    int channels_ = 0;
    double momentum_ = 0.1, epsilon_ = 1e-5;
    Mode mode_ = Mode::Eval;
};

template <class Scalar>
class LeakyRelu {
  public:
    explicit LeakyRelu(double slope = 0.01) : slope_(static_cast<Scalar>(slope)) {}

    Mat<Scalar> forward(const Mat<Scalar>& x) {
        mask_ = (x.array() > Scalar(0)).select(Mat<Scalar>::Ones(x.rows(), x.cols()),
                                               Mat<Scalar>::Constant(x.rows(), x.cols(), slope_));
        return x.array() * mask_.array();
    }
    Mat<Scalar> backward(const Mat<Scalar>& dy) const { return dy.array() * mask_.array(); }

  private:
    Scalar slope_;
    Mat<Scalar> mask_;
};

template <class Scalar>
class Dropout {
  public:
    explicit Dropout(double p = 0.3) : p_(p) {}

    Mat<Scalar> forward(const Mat<Scalar>& x, Mode mode, Rng* rng) {
        if (mode != Mode::Train || p_ <= 0.0 || rng == nullptr) {
            active_ = false;
            return x;
        }
        active_ = true;
        const auto keep = static_cast<Scalar>(1.0 / (1.0 - p_));
        mask_.resize(x.rows(), x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            for (Eigen::Index r = 0; r < x.rows(); ++r)
                mask_(r, c) = rng->uniform() < p_ ? Scalar(0) : keep;
        return x.array() * mask_.array();
    }
    Mat<Scalar> backward(const Mat<Scalar>& dy) const {
        if (!active_) return dy;
        return dy.array() * mask_.array();
    }

  private:
    double p_;
    bool active_ = false;
    Mat<Scalar> mask_;
};

template <class Scalar>
class Linear {
  public:
    void init(const std::string& name, int in, int out, Rng& rng) {
        w_.init(name + ".w", out, in);
        b_.init(name + ".b", out, 1);
        detail::fan_in_uniform(w_.value, in, rng);
    }

    Mat<Scalar> forward(const Mat<Scalar>& x) {
        x_ = x;
        Mat<Scalar> y = w_.value * x;
        y.colwise() += Vec<Scalar>(b_.value.col(0));
        return y;
    }
    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        w_.grad.noalias() += dy * x_.transpose();
        b_.grad.col(0).noalias() += dy.rowwise().sum();
        return w_.value.transpose() * dy;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        out->push_back(&w_);
        out->push_back(&b_);
    }

  private:
    Parameter<Scalar> w_, b_;
    Mat<Scalar> x_;
};

/// Pre-activation bottleneck residual block:
/// bn -> lrelu -> 1x1 -> bn -> lrelu -> dilated 3x1 (stride) -> bn -> lrelu
/// -> 1x1, plus a strided 1x1 projection shortcut.
template <class Scalar>
class BottleneckBlock {
  public:
    void init(const std::string& name, int in_ch, int out_ch, int stride, int dilation,
              const NetConfig& cfg, Rng& rng) {
        const int mid = std::max(1, out_ch / cfg.bottleneck_divisor);
        bn1_.init(name + ".bn1", in_ch, cfg.bn_momentum, cfg.bn_epsilon);
        conv1_.init(name + ".conv1", in_ch, mid, 1, 1, 1, rng);
        bn2_.init(name + ".bn2", mid, cfg.bn_momentum, cfg.bn_epsilon);
        conv2_.init(name + ".conv2", mid, mid, 3, stride, dilation, rng);
        bn3_.init(name + ".bn3", mid, cfg.bn_momentum, cfg.bn_epsilon);
        conv3_.init(name + ".conv3", mid, out_ch, 1, 1, 1, rng);
        shortcut_.init(name + ".shortcut", in_ch, out_ch, 1, stride, 1, rng);
        act1_ = act2_ = act3_ = LeakyRelu<Scalar>(cfg.leaky_slope);
    }

    Mat<Scalar> forward(const Mat<Scalar>& x, int n_items, Mode mode) {
        Mat<Scalar> h = act1_.forward(bn1_.forward(x, mode));
        h = conv1_.forward(h, n_items);
        h = act2_.forward(bn2_.forward(h, mode));
        h = conv2_.forward(h, n_items);
        h = act3_.forward(bn3_.forward(h, mode));
        h = conv3_.forward(h, n_items);
        return h + shortcut_.forward(x, n_items);
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        Mat<Scalar> dx = shortcut_.backward(dy);
        Mat<Scalar> dh = conv3_.backward(dy);
        dh = bn3_.backward(act3_.backward(dh));
        dh = conv2_.backward(dh);
        dh = bn2_.backward(act2_.backward(dh));
        dh = conv1_.backward(dh);
        dx += bn1_.backward(act1_.backward(dh));
        return dx;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        bn1_.collect(out);
        conv1_.collect(out);
        bn2_.collect(out);
        conv2_.collect(out);
        bn3_.collect(out);
        conv3_.collect(out);
        shortcut_.collect(out);
    }
    void collect_buffers(std::vector<Buffer<Scalar>*>* out) {
        bn1_.collect_buffers(out);
        bn2_.collect_buffers(out);
        bn3_.collect_buffers(out);
    }

  private:
    BatchNorm1d<Scalar> bn1_, bn2_, bn3_;
    Conv1d<Scalar> conv1_, conv2_, conv3_;
    Conv1d<Scalar> shortcut_;
    LeakyRelu<Scalar> act1_, act2_, act3_;
};

/// One per-epoch CNN tower: six bottleneck blocks and global average
/// pooling over the remaining time axis.
template <class Scalar>
class CnnTower {
  public:
    void init(const std::string& name, const NetConfig& cfg, Rng& rng) {
        int in_ch = 1;
        for (int i = 0; i < 6; ++i) {
            blocks_[i].init(name + ".block" + std::to_string(i + 1), in_ch, cfg.block_channels[i],
                            cfg.strides[i], cfg.dilations[i], cfg, rng);
            in_ch = cfg.block_channels[i];
        }
        out_ch_ = in_ch;
    }

    /// x: (1 x n_items*epoch_samples) -> pooled (out_ch x n_items)
    Mat<Scalar> forward(const Mat<Scalar>& x, int n_items, Mode mode) {
        Mat<Scalar> h = x;
        for (auto& block : blocks_) h = block.forward(h, n_items, mode);
        n_items_ = n_items;
        t_final_ = static_cast<int>(h.cols()) / n_items;
        Mat<Scalar> pooled(out_ch_, n_items);
        for (int n = 0; n < n_items; ++n)
            pooled.col(n) =
                h.middleCols(static_cast<Eigen::Index>(n) * t_final_, t_final_).rowwise().mean();
        return pooled;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dpooled) {
        Mat<Scalar> dh(out_ch_, static_cast<Eigen::Index>(n_items_) * t_final_);
        const auto inv = static_cast<Scalar>(1.0 / t_final_);
        for (int n = 0; n < n_items_; ++n)
            for (int t = 0; t < t_final_; ++t)
                dh.col(static_cast<Eigen::Index>(n) * t_final_ + t) = dpooled.col(n) * inv;
        for (int i = 5; i >= 0; --i) dh = blocks_[i].backward(dh);
        return dh;
    }

    int out_channels() const { return out_ch_; }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        for (auto& b : blocks_) b.collect(out);
    }
    void collect_buffers(std::vector<Buffer<Scalar>*>* out) {
        for (auto& b : blocks_) b.collect_buffers(out);
    }

  private:
    std::array<BottleneckBlock<Scalar>, 6> blocks_;
    int out_ch_ = 0, n_items_ = 0, t_final_ = 0;
};

/// One LSTM direction over sequences laid out as fat matrices.
template <class Scalar>
class LstmDirection {
  public:
    void init(const std::string& name, int input, int hidden, bool reverse, Rng& rng) {
        input_ = input;
        hidden_ = hidden;
        reverse_ = reverse;
        wx_.init(name + ".wx", 4 * hidden, input);
        wh_.init(name + ".wh", 4 * hidden, hidden);
        b_.init(name + ".b", 4 * hidden, 1);
        detail::fan_in_uniform(wx_.value, input, rng);
        // orthogonal recurrent kernel per gate
        for (int g = 0; g < 4; ++g)
            wh_.value.middleRows(g * hidden, hidden) =
                detail::orthogonal(hidden, rng).template cast<Scalar>();
    }

    /// x: (input x B*L) -> h: (hidden x B*L)
    Mat<Scalar> forward(const Mat<Scalar>& x, int batch, int len) {
        batch_ = batch;
        len_ = len;
        x_ = x;  // callers overwrite their input with the output; keep a copy
        gates_.assign(len, Mat<Scalar>());
        cells_.assign(len, Mat<Scalar>());
        tanh_c_.assign(len, Mat<Scalar>());
        hidden_states_.assign(len, Mat<Scalar>());
        Mat<Scalar> h = Mat<Scalar>::Zero(hidden_, batch);
        Mat<Scalar> c = Mat<Scalar>::Zero(hidden_, batch);
        Mat<Scalar> out(hidden_, static_cast<Eigen::Index>(batch) * len);
        for (int step = 0; step < len; ++step) {
            const int t = reverse_ ? len - 1 - step : step;
            Mat<Scalar> xt = gather(x, t);
            Mat<Scalar> pre = wx_.value * xt + wh_.value * h;
            pre.colwise() += Vec<Scalar>(b_.value.col(0));
            Mat<Scalar> gate(4 * hidden_, batch);
            for (int col = 0; col < batch; ++col) {
                for (int r = 0; r < hidden_; ++r) {
                    gate(r, col) = detail::sigmoid(pre(r, col));                          // i
                    gate(hidden_ + r, col) = detail::sigmoid(pre(hidden_ + r, col));      // f
                    gate(2 * hidden_ + r, col) = std::tanh(pre(2 * hidden_ + r, col));    // g
                    gate(3 * hidden_ + r, col) = detail::sigmoid(pre(3 * hidden_ + r, col));  // o
                }
            }
            auto i = gate.topRows(hidden_);
            auto f = gate.middleRows(hidden_, hidden_);
            auto g = gate.middleRows(2 * hidden_, hidden_);
            auto o = gate.bottomRows(hidden_);
            c = (f.array() * c.array() + i.array() * g.array()).matrix();
            Mat<Scalar> tc = c.array().tanh().matrix();
            h = (o.array() * tc.array()).matrix();
            gates_[t] = gate;
            cells_[t] = c;
            tanh_c_[t] = tc;
            hidden_states_[t] = h;
            scatter(&out, h, t);
        }
        return out;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dout) {
        Mat<Scalar> dx = Mat<Scalar>::Zero(input_, static_cast<Eigen::Index>(batch_) * len_);
        Mat<Scalar> dh_next = Mat<Scalar>::Zero(hidden_, batch_);
        Mat<Scalar> dc_next = Mat<Scalar>::Zero(hidden_, batch_);
        for (int step = len_ - 1; step >= 0; --step) {
            const int t = reverse_ ? len_ - 1 - step : step;
            const auto& gate = gates_[t];
            auto i = gate.topRows(hidden_);
            auto f = gate.middleRows(hidden_, hidden_);
            auto g = gate.middleRows(2 * hidden_, hidden_);
            auto o = gate.bottomRows(hidden_);
            const int prev_t = reverse_ ? t + 1 : t - 1;
            const bool has_prev = reverse_ ? (prev_t < len_) : (prev_t >= 0);
            Mat<Scalar> c_prev = has_prev ? cells_[prev_t] : Mat<Scalar>::Zero(hidden_, batch_);
            Mat<Scalar> h_prev =
                has_prev ? hidden_states_[prev_t] : Mat<Scalar>::Zero(hidden_, batch_);

            Mat<Scalar> dh = gather(dout, t) + dh_next;
            Mat<Scalar> dc = (dh.array() * o.array() * (1 - tanh_c_[t].array().square())).matrix() +
                             dc_next;
            Mat<Scalar> di = (dc.array() * g.array()).matrix();
            Mat<Scalar> df = (dc.array() * c_prev.array()).matrix();
            Mat<Scalar> dg = (dc.array() * i.array()).matrix();
            dc_next = (dc.array() * f.array()).matrix();

            Mat<Scalar> dpre(4 * hidden_, batch_);
            dpre.topRows(hidden_) = (di.array() * i.array() * (1 - i.array())).matrix();
            dpre.middleRows(hidden_, hidden_) = (df.array() * f.array() * (1 - f.array())).matrix();
            dpre.middleRows(2 * hidden_, hidden_) = (dg.array() * (1 - g.array().square())).matrix();
            dpre.bottomRows(hidden_) = (dh.array() * tanh_c_[t].array() * o.array() *
                                        (1 - o.array()))
                                           .matrix();

            wx_.grad.noalias() += dpre * gather(x_, t).transpose();
            wh_.grad.noalias() += dpre * h_prev.transpose();
            b_.grad.col(0).noalias() += dpre.rowwise().sum();
            dh_next = wh_.value.transpose() * dpre;
            Mat<Scalar> dxt = wx_.value.transpose() * dpre;
            scatter_add(&dx, dxt, t);
        }
        return dx;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        out->push_back(&wx_);
        out->push_back(&wh_);
        out->push_back(&b_);
    }

  private:
    Mat<Scalar> gather(const Mat<Scalar>& fat, int t) const {
        Mat<Scalar> out(fat.rows(), batch_);
        for (int bi = 0; bi < batch_; ++bi)
            out.col(bi) = fat.col(static_cast<Eigen::Index>(bi) * len_ + t);
        return out;
    }
    void scatter(Mat<Scalar>* fat, const Mat<Scalar>& cols, int t) const {
        for (int bi = 0; bi < batch_; ++bi)
            fat->col(static_cast<Eigen::Index>(bi) * len_ + t) = cols.col(bi);
    }
    void scatter_add(Mat<Scalar>* fat, const Mat<Scalar>& cols, int t) const {
        for (int bi = 0; bi < batch_; ++bi)
            fat->col(static_cast<Eigen::Index>(bi) * len_ + t) += cols.col(bi);
    }

    Parameter<Scalar> wx_, wh_, b_;
    Mat<Scalar> x_;
    std::vector<Mat<Scalar>> gates_, cells_, tanh_c_, hidden_states_;
    int input_ = 0, hidden_ = 0, batch_ = 0, len_ = 0;
    bool reverse_ = false;
};

template <class Scalar>
class BiLstm {
  public:
    void init(const std::string& name, int input, int hidden, Rng& rng) {
        hidden_ = hidden;
        fwd_.init(name + ".fwd", input, hidden, false, rng);
        bwd_.init(name + ".bwd", input, hidden, true, rng);
    }

    Mat<Scalar> forward(const Mat<Scalar>& x, int batch, int len) {
        Mat<Scalar> hf = fwd_.forward(x, batch, len);
        Mat<Scalar> hb = bwd_.forward(x, batch, len);
        Mat<Scalar> out(2 * hidden_, x.cols());
        out.topRows(hidden_) = hf;
        out.bottomRows(hidden_) = hb;
        return out;
    }
    Mat<Scalar> backward(const Mat<Scalar>& dout) {
        Mat<Scalar> dx = fwd_.backward(dout.topRows(hidden_));
        dx += bwd_.backward(dout.bottomRows(hidden_));
        return dx;
    }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        fwd_.collect(out);
        bwd_.collect(out);
    }

  private:
    LstmDirection<Scalar> fwd_, bwd_;
    int hidden_ = 0;
};

/// Additive time-wise attention: one positive weight per epoch (softmax over
/// the sequence) rescaling the layer-1 outputs.
template <class Scalar>
class Attention {
  public:
    void init(const std::string& name, int input, int attn_dim, Rng& rng) {
        input_ = input;
        dim_ = attn_dim;
        w_.init(name + ".w", attn_dim, input);
        b_.init(name + ".b", attn_dim, 1);
        v_.init(name + ".v", attn_dim, 1);
        detail::fan_in_uniform(w_.value, input, rng);
        detail::fan_in_uniform(v_.value, attn_dim, rng);
    }

    Mat<Scalar> forward(const Mat<Scalar>& h, int batch, int len) {
        batch_ = batch;
        len_ = len;
        h_ = h;
        u_ = (w_.value * h).colwise() + Vec<Scalar>(b_.value.col(0));
        u_ = u_.array().tanh().matrix();
        Eigen::Matrix<Scalar, 1, Eigen::Dynamic> scores = v_.value.col(0).transpose() * u_;
        weights_.resize(batch, len);
        for (int bi = 0; bi < batch; ++bi) {
            Scalar mx = scores(bi * len);
            for (int t = 1; t < len; ++t) mx = std::max(mx, scores(bi * len + t));
            Scalar denom = Scalar(0);
            for (int t = 0; t < len; ++t) {
                weights_(bi, t) = std::exp(scores(bi * len + t) - mx);
                denom += weights_(bi, t);
            }
            for (int t = 0; t < len; ++t) weights_(bi, t) /= denom;
        }
        Mat<Scalar> out(h.rows(), h.cols());
        for (int bi = 0; bi < batch; ++bi)
            for (int t = 0; t < len; ++t)
                out.col(static_cast<Eigen::Index>(bi) * len + t) =
                    h.col(static_cast<Eigen::Index>(bi) * len + t) * weights_(bi, t);
        return out;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dout) {
        Mat<Scalar> dh(h_.rows(), h_.cols());
        Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dscores(h_.cols());
        for (int bi = 0; bi < batch_; ++bi) {
            // d(alpha_t) then softmax jacobian
            Vec<Scalar> dalpha(len_);
            for (int t = 0; t < len_; ++t) {
                auto col = static_cast<Eigen::Index>(bi) * len_ + t;
                dalpha(t) = dout.col(col).dot(h_.col(col));
                dh.col(col) = dout.col(col) * weights_(bi, t);
            }
            Scalar inner = Scalar(0);
            for (int t = 0; t < len_; ++t) inner += dalpha(t) * weights_(bi, t);
            for (int t = 0; t < len_; ++t)
                dscores(static_cast<Eigen::Index>(bi) * len_ + t) =
                    weights_(bi, t) * (dalpha(t) - inner);
        }
        // scores = v' tanh(W h + b)
        v_.grad.col(0).noalias() += u_ * dscores.transpose();
        Mat<Scalar> du =
            ((v_.value.col(0) * dscores).array() * (1 - u_.array().square())).matrix();
        w_.grad.noalias() += du * h_.transpose();
        b_.grad.col(0).noalias() += du.rowwise().sum();
        dh.noalias() += w_.value.transpose() * du;
        return dh;
    }

    const Mat<Scalar>& weights() const { return weights_; }

    void collect(std::vector<Parameter<Scalar>*>* out) {
        out->push_back(&w_);
        out->push_back(&b_);
        out->push_back(&v_);
    }

  private:
    Parameter<Scalar> w_, b_, v_;
    Mat<Scalar> h_, u_, weights_;
    int input_ = 0, dim_ = 0, batch_ = 0, len_ = 0;
};

/// Two-layer MLP head (leaky activation, linear output).
template <class Scalar>
class MlpHead {
  public:
    void init(const std::string& name, int input, int hidden, int output, double slope,
              Rng& rng) {
        l1_.init(name + ".l1", input, hidden, rng);
        l2_.init(name + ".l2", hidden, output, rng);
        act_ = LeakyRelu<Scalar>(slope);
    }
    Mat<Scalar> forward(const Mat<Scalar>& x) { return l2_.forward(act_.forward(l1_.forward(x))); }
    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        return l1_.backward(act_.backward(l2_.backward(dy)));
    }
    void collect(std::vector<Parameter<Scalar>*>* out) {
        l1_.collect(out);
        l2_.collect(out);
    }

  private:
    Linear<Scalar> l1_, l2_;
    LeakyRelu<Scalar> act_;
};

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Forward is the identity; backward multiplies the upstream gradient by
/// -lambda.
template <class Scalar>
Mat<Scalar> gradient_reversal_forward(const Mat<Scalar>& x) {
    return x;
}

template <class Scalar>
Mat<Scalar> gradient_reversal_backward(const Mat<Scalar>& upstream, double lambda_adv) {
    return upstream * static_cast<Scalar>(-lambda_adv);
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <class Scalar>
struct SeqBatch {
    int batch = 0;   // B sequences
    int len = 0;     // L epochs each
    Mat<Scalar> respiration;  // (1 x B*L*epoch_samples)
    Mat<Scalar> activity;     // (1 x B*L*epoch_samples)
    std::vector<int> labels;   // per epoch (B*L), -1 if unlabeled
    std::vector<int> domains;  // per epoch (B*L): 0 source, 1 target

    int items() const { return batch * len; }
};

template <class Scalar>
class StagingModel {
  public:
    explicit StagingModel(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg), init_seed_(seed) {
        cfg_.validate();
        Rng rng(seed ^ 0x6d6f64656cULL);
        tower_resp_.init("tower_resp", cfg_, rng);
        tower_act_.init("tower_act", cfg_, rng);
        const int pooled = tower_resp_.out_channels() + tower_act_.out_channels();
        proj_.init("proj", pooled, cfg_.feature_dim(), rng);
        lstm1_.init("lstm1", cfg_.feature_dim(), cfg_.lstm_hidden, rng);
        attn_.init("attn", cfg_.feature_dim(), cfg_.attention_dim, rng);
        lstm2_.init("lstm2", cfg_.feature_dim(), cfg_.lstm_hidden, rng);
        classifier_.init("classifier", cfg_.feature_dim(), cfg_.head_hidden, kNumStages,
                         cfg_.leaky_slope, rng);
        discriminator_.init("discriminator", cfg_.feature_dim(), cfg_.head_hidden, 1,
                            cfg_.leaky_slope, rng);
        drop_resp_ = Dropout<Scalar>(cfg_.dropout);
        drop_act_ = Dropout<Scalar>(cfg_.dropout);
        drop_mid_ = Dropout<Scalar>(cfg_.dropout);
    }

    const NetConfig& config() const { return cfg_; }
    std::uint64_t init_seed() const { return init_seed_; }

    /// Feature extractor F: per-epoch 2H-dimensional features (fat matrix).
    Mat<Scalar> extract(const SeqBatch<Scalar>& batch, Mode mode, Rng* dropout_rng = nullptr) {
        const int n = batch.items();
        Mat<Scalar> pr = tower_resp_.forward(batch.respiration, n, mode);
        pr = drop_resp_.forward(pr, mode, dropout_rng);
        Mat<Scalar> act_input = cfg_.use_activity
                                    ? batch.activity
                                    : Mat<Scalar>::Zero(batch.activity.rows(),
                                                        batch.activity.cols());
        Mat<Scalar> pa = tower_act_.forward(act_input, n, mode);
        pa = drop_act_.forward(pa, mode, dropout_rng);
        Mat<Scalar> cat(pr.rows() + pa.rows(), n);
        cat.topRows(pr.rows()) = pr;
        cat.bottomRows(pa.rows()) = pa;
        Mat<Scalar> z = proj_.forward(cat);
        z = lstm1_.forward(z, batch.batch, batch.len);
        z = attn_.forward(z, batch.batch, batch.len);
        z = drop_mid_.forward(z, mode, dropout_rng);
        z = lstm2_.forward(z, batch.batch, batch.len);
        last_batch_ = batch.batch;
        last_len_ = batch.len;
        return z;
    }

    /// Backward through F given d(loss)/d(features).
    void extract_backward(const Mat<Scalar>& dz) {
        Mat<Scalar> d = lstm2_.backward(dz);
        d = drop_mid_.backward(d);
        d = attn_.backward(d);
        d = lstm1_.backward(d);
        d = proj_.backward(d);
        const int pr_rows = tower_resp_.out_channels();
        Mat<Scalar> dpr = drop_resp_.backward(d.topRows(pr_rows));
        Mat<Scalar> dpa = drop_act_.backward(d.bottomRows(tower_act_.out_channels()));
        tower_resp_.backward(dpr);
        tower_act_.backward(dpa);
    }

    Mat<Scalar> classify_logits(const Mat<Scalar>& z) { return classifier_.forward(z); }
    Mat<Scalar> classifier_backward(const Mat<Scalar>& dlogits) {
        return classifier_.backward(dlogits);
    }

    Mat<Scalar> discriminate_logits(const Mat<Scalar>& z) { return discriminator_.forward(z); }
    Mat<Scalar> discriminator_backward(const Mat<Scalar>& dlogits) {
        return discriminator_.backward(dlogits);
    }

    const Mat<Scalar>& attention_weights() const { return attn_.weights(); }

    std::vector<Parameter<Scalar>*> extractor_params() {
        std::vector<Parameter<Scalar>*> out;
        tower_resp_.collect(&out);
        tower_act_.collect(&out);
        proj_.collect(&out);
        lstm1_.collect(&out);
        attn_.collect(&out);
        lstm2_.collect(&out);
        return out;
    }
    std::vector<Parameter<Scalar>*> classifier_params() {
        std::vector<Parameter<Scalar>*> out;
        classifier_.collect(&out);
        return out;
    }
    std::vector<Parameter<Scalar>*> discriminator_params() {
        std::vector<Parameter<Scalar>*> out;
        discriminator_.collect(&out);
        return out;
    }
    std::vector<Parameter<Scalar>*> all_params() {
        auto out = extractor_params();
        auto c = classifier_params();
        auto d = discriminator_params();
        out.insert(out.end(), c.begin(), c.end());
        out.insert(out.end(), d.begin(), d.end());
        return out;
    }
    std::vector<Buffer<Scalar>*> buffers() {
        std::vector<Buffer<Scalar>*> out;
        tower_resp_.collect_buffers(&out);
        tower_act_.collect_buffers(&out);
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto* p : all_params()) n += static_cast<std::size_t>(p->count());
        return n;
    }

    void zero_grads() {
        for (auto* p : all_params()) p->grad.setZero();
    }

  private:
    NetConfig cfg_;
    std::uint64_t init_seed_;
    CnnTower<Scalar> tower_resp_, tower_act_;
    Linear<Scalar> proj_;
    BiLstm<Scalar> lstm1_, lstm2_;
    Attention<Scalar> attn_;
    MlpHead<Scalar> classifier_, discriminator_;
    Dropout<Scalar> drop_resp_, drop_act_, drop_mid_;
    int last_batch_ = 0, last_len_ = 0;
};

// ---------------------------------------------------------------------------
// Posteriors
// ---------------------------------------------------------------------------

/// Column-wise softmax of logits, numerically shifted.
template <class Scalar>
Mat<Scalar> softmax_columns(const Mat<Scalar>& logits) {
    Mat<Scalar> out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        Scalar mx = logits.col(c).maxCoeff();
        Vec<Scalar> e = (logits.col(c).array() - mx).exp();
        out.col(c) = e / e.sum();
    }
    return out;
}

template <class Scalar>
Vec<Scalar> sigmoid_columns(const Mat<Scalar>& logits) {
    Vec<Scalar> out(logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) out(c) = detail::sigmoid(logits(0, c));
    return out;
}

}  // namespace somnoradar::net
