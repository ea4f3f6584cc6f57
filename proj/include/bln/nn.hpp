#pragma once

// Layers, losses, the Adam optimizer and a sequential network used to run
// the normalizer comparisons. Normalizers always follow a nonlinearity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bln/data.hpp"
#include "bln/error.hpp"
#include "bln/norm.hpp"
#include "bln/tensor.hpp"

namespace bln {

enum class LayerKind { dense, conv2d, avgpool2x2, rnn_cell, activation, normalizer, flatten };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::avgpool2x2: return "avgpool2x2";
    case LayerKind::rnn_cell: return "rnn-cell";
    case LayerKind::activation: return "activation";
    case LayerKind::normalizer: return "normalizer";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

/// A trainable tensor and its gradient, owned by a layer.
struct Param {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

/// Named copy of a layer buffer (parameters and running statistics).
struct NamedBuffer {
  std::string name;
  Tensor value;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::string describe() const { return to_string(kind()); }

  /// Training-mode forward; saves whatever backward needs.
  virtual Tensor forward(const Tensor& x) = 0;
  /// Consumes the saved forward state, writes parameter gradients and
  /// returns dL/dx.
  virtual Tensor backward(const Tensor& dy) = 0;
  /// Inference-mode forward; never mutates the layer.
  virtual Tensor infer(const Tensor& x, InferenceFlags flags) const = 0;

  virtual std::vector<Param> params() { return {}; }
  virtual std::vector<NamedBuffer> state() const { return {}; }
  virtual void load_state(const std::vector<NamedBuffer>& buffers) {
    if (!buffers.empty()) throw DataError(describe() + " has no state to load");
  }

  virtual std::unique_ptr<Layer> clone() const = 0;
};

namespace detail {

inline void expect_rank(const Tensor& x, std::size_t rank, const char* who) {
  if (x.rank() != rank)
    throw ShapeError(std::string(who) + " expects rank " + std::to_string(rank) +
                     ", got " + shape_str(x.shape()));
}

inline void load_into(const std::vector<NamedBuffer>& buffers, const std::string& name,
                      Tensor& dst) {
  for (const auto& b : buffers)
    if (b.name == name) {
      if (b.value.shape() != dst.shape())
        throw DataError("buffer '" + name + "' has shape " + shape_str(b.value.shape()) +
                        ", expected " + shape_str(dst.shape()));
      dst = b.value;
      return;
    }
  throw DataError("missing buffer '" + name + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------

class Dense final : public Layer {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng, double init_scale = 1.0)
      : weight_(randn({in, out}, rng, init_scale / std::sqrt(static_cast<double>(in)))),
        bias_(zeros({out})),
        dweight_(zeros({in, out})),
        dbias_(zeros({out})) {}

  LayerKind kind() const override { return LayerKind::dense; }

  Tensor forward(const Tensor& x) override {
    input_ = x;
    return apply(x);
  }

  Tensor backward(const Tensor& dy) override {
    dweight_ = matmul(transpose2d(input_), dy);
    dbias_ = zeros(bias_.shape());
    for (std::size_t i = 0; i < dy.dim(0); ++i)
      for (std::size_t j = 0; j < dy.dim(1); ++j) dbias_[j] += dy.at(i, j);
    return matmul(dy, transpose2d(weight_));
  }

  Tensor infer(const Tensor& x, InferenceFlags) const override { return apply(x); }

  std::vector<Param> params() override {
    return {{"weight", &weight_, &dweight_}, {"bias", &bias_, &dbias_}};
  }
  std::vector<NamedBuffer> state() const override {
    return {{"weight", weight_}, {"bias", bias_}};
  }
  void load_state(const std::vector<NamedBuffer>& b) override {
    detail::load_into(b, "weight", weight_);
    detail::load_into(b, "bias", bias_);
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

  const Tensor& weight() const { return weight_; }
  Tensor& weight() { return weight_; }

 private:
  Tensor apply(const Tensor& x) const {
    detail::expect_rank(x, 2, "dense");
    Tensor y = matmul(x, weight_);
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t j = 0; j < y.dim(1); ++j) y.at(i, j) += bias_[j];
    return y;
  }

  Tensor weight_, bias_, dweight_, dbias_;
  Tensor input_;
};

/// 2-D convolution, stride 1, valid padding. Input [N, C, H, W].
class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng)
      : weight_(randn({out_channels, in_channels, kernel, kernel}, rng,
                      std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel)))),
        bias_(zeros({out_channels})),
        dweight_(zeros(weight_.shape())),
        dbias_(zeros({out_channels})) {}

  LayerKind kind() const override { return LayerKind::conv2d; }

  Tensor forward(const Tensor& x) override {
    input_ = x;
    return apply(x);
  }

  Tensor backward(const Tensor& dy) override {
    const Tensor& x = input_;
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t o = weight_.dim(0), k = weight_.dim(2);
    const std::size_t oh = h - k + 1, ow = w - k + 1;
    dweight_ = zeros(weight_.shape());
    dbias_ = zeros(bias_.shape());
    Tensor dx(x.shape());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t f = 0; f < o; ++f)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double g = dy[((b * o + f) * oh + i) * ow + j];
            dbias_[f] += g;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < k; ++p)
                for (std::size_t q = 0; q < k; ++q) {
                  const std::size_t xi = ((b * c + ch) * h + i + p) * w + j + q;
                  const std::size_t wi = ((f * c + ch) * k + p) * k + q;
                  dweight_[wi] += g * x[xi];
                  dx[xi] += g * weight_[wi];
                }
          }
    return dx;
  }

  Tensor infer(const Tensor& x, InferenceFlags) const override { return apply(x); }

  std::vector<Param> params() override {
    return {{"weight", &weight_, &dweight_}, {"bias", &bias_, &dbias_}};
  }
  std::vector<NamedBuffer> state() const override {
    return {{"weight", weight_}, {"bias", bias_}};
  }
  void load_state(const std::vector<NamedBuffer>& b) override {
    detail::load_into(b, "weight", weight_);
    detail::load_into(b, "bias", bias_);
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  Tensor& weight() { return weight_; }

 private:
  Tensor apply(const Tensor& x) const {
    detail::expect_rank(x, 4, "conv2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t o = weight_.dim(0), k = weight_.dim(2);
    if (c != weight_.dim(1)) throw ShapeError("conv2d channel mismatch");
    if (h < k || w < k) throw ShapeError("conv2d input smaller than kernel");
    const std::size_t oh = h - k + 1, ow = w - k + 1;
    Tensor y({n, o, oh, ow});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t f = 0; f < o; ++f)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = bias_[f];
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < k; ++p)
                for (std::size_t q = 0; q < k; ++q)
                  acc += weight_[((f * c + ch) * k + p) * k + q] *
                         x[((b * c + ch) * h + i + p) * w + j + q];
            y[((b * o + f) * oh + i) * ow + j] = acc;
          }
    return y;
  }

  Tensor weight_, bias_, dweight_, dbias_;
  Tensor input_;
};

/// 2x2 average pooling, stride 2; odd trailing rows/columns are dropped.
class AvgPool2x2 final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::avgpool2x2; }

  Tensor forward(const Tensor& x) override {
    input_shape_ = x.shape();
    return apply(x);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t n = input_shape_[0], c = input_shape_[1], h = input_shape_[2],
                      w = input_shape_[3];
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor dx(input_shape_);
    for (std::size_t b = 0; b < n * c; ++b)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double g = 0.25 * dy[(b * oh + i) * ow + j];
          for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t q = 0; q < 2; ++q) dx[(b * h + 2 * i + p) * w + 2 * j + q] = g;
        }
    return dx;
  }

  Tensor infer(const Tensor& x, InferenceFlags) const override { return apply(x); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2x2>(*this); }

 private:
  static Tensor apply(const Tensor& x) {
    detail::expect_rank(x, 4, "avgpool2x2");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw ShapeError("avgpool2x2 input smaller than 2x2");
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor y({n, c, oh, ow});
    for (std::size_t b = 0; b < n * c; ++b)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t q = 0; q < 2; ++q) acc += x[(b * h + 2 * i + p) * w + 2 * j + q];
          y[(b * oh + i) * ow + j] = 0.25 * acc;
        }
    return y;
  }

  Shape input_shape_;
};

class Flatten final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::flatten; }
  Tensor forward(const Tensor& x) override {
    input_shape_ = x.shape();
    return flatten2d(x);
  }
  Tensor backward(const Tensor& dy) override { return reshape(dy, input_shape_); }
  Tensor infer(const Tensor& x, InferenceFlags) const override { return flatten2d(x); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  Shape input_shape_;
};

enum class ActivationKind { relu, tanh, sigmoid };

inline std::string to_string(ActivationKind a) {
  switch (a) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}
inline Tensor tanh(const Tensor& x) {
  return map(x, [](double v) { return std::tanh(v); });
}
inline Tensor sigmoid(const Tensor& x) {
  return map(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

class Activation final : public Layer {
 public:
  explicit Activation(ActivationKind fn) : fn_(fn) {}

  LayerKind kind() const override { return LayerKind::activation; }
  std::string describe() const override { return to_string(fn_); }
  ActivationKind function() const { return fn_; }

  Tensor forward(const Tensor& x) override {
    input_ = x;
    output_ = apply(x);
    return output_;
  }

  Tensor backward(const Tensor& dy) override {
    switch (fn_) {
      case ActivationKind::relu:
        return zip(dy, input_, [](double g, double v) { return v > 0.0 ? g : 0.0; }, "relu");
      case ActivationKind::tanh:
        return zip(dy, output_, [](double g, double y) { return g * (1.0 - y * y); }, "tanh");
      case ActivationKind::sigmoid:
        return zip(dy, output_, [](double g, double y) { return g * y * (1.0 - y); },
                   "sigmoid");
    }
    throw Error("unknown activation");
  }

  Tensor infer(const Tensor& x, InferenceFlags) const override { return apply(x); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Activation>(*this); }

 private:
  Tensor apply(const Tensor& x) const {
    switch (fn_) {
      case ActivationKind::relu: return relu(x);
      case ActivationKind::tanh: return tanh(x);
      case ActivationKind::sigmoid: return sigmoid(x);
    }
    throw Error("unknown activation");
  }

  ActivationKind fn_;
  Tensor input_, output_;
};

/// Elman recurrence h_t = tanh(x_t Wx + h_{t-1} Wh + b) over input
/// [N, T, V]; emits the final hidden state [N, H].
class RnnCell final : public Layer {
 public:
  RnnCell(std::size_t input, std::size_t hidden, Rng& rng)
      : wx_(randn({input, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(input)))),
        wh_(randn({hidden, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
        b_(zeros({hidden})),
        dwx_(zeros(wx_.shape())),
        dwh_(zeros(wh_.shape())),
        db_(zeros(b_.shape())) {}

  LayerKind kind() const override { return LayerKind::rnn_cell; }

  Tensor forward(const Tensor& x) override {
    steps_.clear();
    hidden_.clear();
    return run(x, &steps_, &hidden_);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t t_len = steps_.size();
    const std::size_t n = dy.dim(0), v = wx_.dim(0);
    dwx_ = zeros(wx_.shape());
    dwh_ = zeros(wh_.shape());
    db_ = zeros(b_.shape());
    Tensor dx({n, t_len, v});
    Tensor dh = dy;
    for (std::size_t t = t_len; t-- > 0;) {
      const Tensor& h = hidden_[t + 1];
      Tensor da = zip(dh, h, [](double g, double y) { return g * (1.0 - y * y); }, "rnn");
      dwx_ = add(dwx_, matmul(transpose2d(steps_[t]), da));
      dwh_ = add(dwh_, matmul(transpose2d(hidden_[t]), da));
      for (std::size_t i = 0; i < da.dim(0); ++i)
        for (std::size_t j = 0; j < da.dim(1); ++j) db_[j] += da.at(i, j);
      const Tensor dxt = matmul(da, transpose2d(wx_));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < v; ++j) dx[(i * t_len + t) * v + j] = dxt.at(i, j);
      dh = matmul(da, transpose2d(wh_));
    }
    return dx;
  }

  Tensor infer(const Tensor& x, InferenceFlags) const override {
    return run(x, nullptr, nullptr);
  }

  std::vector<Param> params() override {
    return {{"wx", &wx_, &dwx_}, {"wh", &wh_, &dwh_}, {"bias", &b_, &db_}};
  }
  std::vector<NamedBuffer> state() const override {
    return {{"wx", wx_}, {"wh", wh_}, {"bias", b_}};
  }
  void load_state(const std::vector<NamedBuffer>& b) override {
    detail::load_into(b, "wx", wx_);
    detail::load_into(b, "wh", wh_);
    detail::load_into(b, "bias", b_);
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<RnnCell>(*this); }

  Tensor& wx() { return wx_; }
  Tensor& wh() { return wh_; }
  Tensor& bias() { return b_; }

 private:
  Tensor run(const Tensor& x, std::vector<Tensor>* steps, std::vector<Tensor>* hidden) const {
    detail::expect_rank(x, 3, "rnn-cell");
    const std::size_t n = x.dim(0), t_len = x.dim(1), v = x.dim(2);
    if (v != wx_.dim(0)) throw ShapeError("rnn-cell input width mismatch");
    Tensor h = zeros({n, wh_.dim(0)});
    if (hidden) hidden->push_back(h);
    for (std::size_t t = 0; t < t_len; ++t) {
      Tensor xt({n, v});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < v; ++j) xt.at(i, j) = x[(i * t_len + t) * v + j];
      Tensor a = add(matmul(xt, wx_), matmul(h, wh_));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) a.at(i, j) += b_[j];
      h = tanh(a);
      if (steps) steps->push_back(std::move(xt));
      if (hidden) hidden->push_back(h);
    }
    return h;
  }

  Tensor wx_, wh_, b_, dwx_, dwh_, db_;
  std::vector<Tensor> steps_;
  std::vector<Tensor> hidden_;
};

/// BN, LN or BLN over the flattened non-batch dimensions, with learnable
/// per-feature gamma/beta and, for BN/BLN, population statistics.
class Norm final : public Layer {
 public:
  Norm(NormKind which, std::size_t features, double epsilon = kDefaultEpsilon,
       Momentum momentum = {})
      : which_(which),
        params_(NormParams::identity(features, epsilon, momentum)),
        running_(RunningStats::initial(features)),
        dgamma_(zeros({features})),
        dbeta_(zeros({features})) {}

  LayerKind kind() const override { return LayerKind::normalizer; }
  std::string describe() const override { return to_string(which_); }
  NormKind which() const { return which_; }

  Tensor forward(const Tensor& x) override {
    TrainForward f;
    switch (which_) {
      case NormKind::batch: f = bn_forward_train(x, params_, running_); break;
      case NormKind::layer: f = ln_forward(x, params_); break;
      case NormKind::batch_layer: f = bln_forward_train(x, params_, running_); break;
    }
    if (which_ != NormKind::layer) running_ = std::move(f.running);
    cache_ = std::move(f.cache);
    has_cache_ = true;
    return std::move(f.y);
  }

  Tensor backward(const Tensor& dy) override {
    if (!has_cache_) throw Error("normalizer backward without a matching forward");
    NormGrads g = norm_backward(cache_, dy);
    has_cache_ = false;
    dgamma_ = std::move(g.dgamma);
    dbeta_ = std::move(g.dbeta);
    return std::move(g.dx);
  }

  /// BN always uses population statistics, LN never does, BLN follows
  /// the flags.
  Tensor infer(const Tensor& x, InferenceFlags flags) const override {
    switch (which_) {
      case NormKind::batch: return bn_forward_infer(x, params_, running_);
      case NormKind::layer: return ln_forward(x, params_).y;
      case NormKind::batch_layer: return bln_forward_infer(x, params_, running_, flags);
    }
    throw Error("unknown normalizer");
  }

  std::vector<Param> params() override {
    return {{"gamma", &params_.gamma, &dgamma_}, {"beta", &params_.beta, &dbeta_}};
  }

  std::vector<NamedBuffer> state() const override {
    std::vector<NamedBuffer> out{{"gamma", params_.gamma}, {"beta", params_.beta}};
    if (which_ != NormKind::layer) {
      out.push_back({"e_mu_b", running_.e_mu_b});
      out.push_back({"e_sigma_b", running_.e_sigma_b});
      out.push_back({"e_var_b", running_.e_var_b});
      out.push_back({"e_mu_f", Tensor::vector({running_.e_mu_f})});
      out.push_back({"e_sigma_f", Tensor::vector({running_.e_sigma_f})});
      out.push_back({"count", Tensor::vector({static_cast<double>(running_.count)})});
      out.push_back({"batch_size", Tensor::vector({static_cast<double>(running_.batch_size)})});
    }
    return out;
  }

  void load_state(const std::vector<NamedBuffer>& b) override {
    detail::load_into(b, "gamma", params_.gamma);
    detail::load_into(b, "beta", params_.beta);
    if (which_ == NormKind::layer) return;
    detail::load_into(b, "e_mu_b", running_.e_mu_b);
    detail::load_into(b, "e_sigma_b", running_.e_sigma_b);
    detail::load_into(b, "e_var_b", running_.e_var_b);
    Tensor scalar({1});
    detail::load_into(b, "e_mu_f", scalar);
    running_.e_mu_f = scalar[0];
    detail::load_into(b, "e_sigma_f", scalar);
    running_.e_sigma_f = scalar[0];
    detail::load_into(b, "count", scalar);
    running_.count = static_cast<std::size_t>(scalar[0]);
    detail::load_into(b, "batch_size", scalar);
    running_.batch_size = static_cast<std::size_t>(scalar[0]);
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Norm>(*this); }

  const NormParams& norm_params() const { return params_; }
  NormParams& norm_params() { return params_; }
  const RunningStats& running() const { return running_; }
  void set_running(RunningStats r) { running_ = std::move(r); }

 private:
  NormKind which_;
  NormParams params_;
  RunningStats running_;
  Tensor dgamma_, dbeta_;
  NormCache cache_;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Losses

struct LossResult {
  double loss;
  Tensor dlogits;
};

inline Tensor softmax(const Tensor& logits) {
  detail::expect_rank(logits, 2, "softmax");
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < logits.dim(1); ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.dim(1); ++j) {
      p.at(i, j) = std::exp(logits.at(i, j) - mx);
      z += p.at(i, j);
    }
    for (std::size_t j = 0; j < logits.dim(1); ++j) p.at(i, j) /= z;
  }
  return p;
}

inline void check_labels(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::expect_rank(logits, 2, "loss");
  if (labels.size() != logits.dim(0)) throw ShapeError("label count does not match batch");
  for (auto l : labels)
    if (l >= logits.dim(1))
      throw DataError("label " + std::to_string(l) + " out of range for " +
                      std::to_string(logits.dim(1)) + " classes");
}

/// Mean negative log-likelihood of softmax(logits) and its gradient.
inline LossResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  check_labels(logits, labels);
  const std::size_t n = logits.dim(0);
  Tensor dl = softmax(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < logits.dim(1); ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.dim(1); ++j) z += std::exp(logits.at(i, j) - mx);
    loss += std::log(z) + mx - logits.at(i, labels[i]);
    dl.at(i, labels[i]) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return {loss * inv_n, scale(dl, inv_n)};
}

inline std::size_t correct_count(const Tensor& logits, std::span<const std::size_t> labels) {
  check_labels(logits, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.dim(1); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hits += best == labels[i];
  }
  return hits;
}

inline double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  return static_cast<double>(correct_count(logits, labels)) /
         static_cast<double>(logits.dim(0));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::size_t step = 0;
};

/// One bias-corrected Adam update over all parameters, in order.
inline void adam_step(std::span<const Param> params, AdamState& s) {
  if (s.first.empty()) {
    for (const auto& p : params) {
      s.first.push_back(zeros(p.value->shape()));
      s.second.push_back(zeros(p.value->shape()));
    }
  }
  if (s.first.size() != params.size()) throw ShapeError("adam state does not match parameters");
  ++s.step;
  const auto& c = s.config;
  const double t = static_cast<double>(s.step);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].value;
    const Tensor& g = *params[i].grad;
    if (g.shape() != w.shape() || s.first[i].shape() != w.shape())
      throw ShapeError("adam shape mismatch for '" + params[i].name + "'");
    for (std::size_t j = 0; j < w.size(); ++j) {
      s.first[i][j] = c.beta1 * s.first[i][j] + (1.0 - c.beta1) * g[j];
      s.second[i][j] = c.beta2 * s.second[i][j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = s.first[i][j] / corr1;
      const double v_hat = s.second[i][j] / corr2;
      w[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Network

enum class Normalizer { none, bn, ln, bln };

inline std::string to_string(Normalizer n) {
  switch (n) {
    case Normalizer::none: return "none";
    case Normalizer::bn: return "bn";
    case Normalizer::ln: return "ln";
    case Normalizer::bln: return "bln";
  }
  return "?";
}

inline Normalizer parse_normalizer(const std::string& s) {
  if (s == "none") return Normalizer::none;
  if (s == "bn") return Normalizer::bn;
  if (s == "ln") return Normalizer::ln;
  if (s == "bln") return Normalizer::bln;
  throw UsageError("unknown normalizer '" + s + "'");
}

inline NormKind norm_kind(Normalizer n) {
  switch (n) {
    case Normalizer::bn: return NormKind::batch;
    case Normalizer::ln: return NormKind::layer;
    case Normalizer::bln: return NormKind::batch_layer;
    case Normalizer::none: break;
  }
  throw UsageError("normalizer 'none' has no layer kind");
}

/// Ordered layer stack. Normalizer layers must directly follow a
/// nonlinearity (an activation, or a recurrent cell whose output is
/// already tanh'd).
class Network {
 public:
  Network() = default;
  Network(const Network& other) { *this = other; }
  Network& operator=(const Network& other) {
    if (this == &other) return *this;
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  Network& add(std::unique_ptr<Layer> layer) {
    if (layer->kind() == LayerKind::normalizer) {
      const bool after_nonlinearity =
          !layers_.empty() && (layers_.back()->kind() == LayerKind::activation ||
                               layers_.back()->kind() == LayerKind::rnn_cell);
      if (!after_nonlinearity)
        throw UsageError("normalizer must be placed immediately after a nonlinearity");
    }
    layers_.push_back(std::move(layer));
    return *this;
  }

  template <typename L, typename... Args>
  Network& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }

  Tensor forward(const Tensor& x) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }

  Tensor backward(const Tensor& dlogits) {
    Tensor g = dlogits;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  Tensor infer(const Tensor& x, InferenceFlags flags = {}) const {
    Tensor h = x;
    for (const auto& l : layers_) h = l->infer(h, flags);
    return h;
  }

  std::vector<Param> params() {
    std::vector<Param> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& p : layers_[i]->params())
        out.push_back({std::to_string(i) + "." + layers_[i]->describe() + "." + p.name, p.value,
                       p.grad});
    return out;
  }

  bool has_bln() const {
    return std::any_of(layers_.begin(), layers_.end(), [](const auto& l) {
      return l->kind() == LayerKind::normalizer &&
             static_cast<const Norm&>(*l).which() == NormKind::batch_layer;
    });
  }

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Training and evaluation

struct EpochMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t steps = 0;
};

/// One pass over a seeded shuffle of the dataset. Loss and accuracy are
/// sample-weighted averages of the training-mode batch results.
inline EpochMetrics network_train_epoch(Network& net, const Dataset& data,
                                        std::size_t batch_size, AdamState& adam, Rng rng) {
  if (data.size() == 0) throw DataError("empty dataset");
  if (batch_size == 0) throw UsageError("batch size must be at least 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  EpochMetrics em;
  double loss_sum = 0.0;
  std::size_t hits = 0;
  auto params = net.params();
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    const Tensor x = take_rows(data.inputs, idx);
    std::vector<std::size_t> y;
    for (auto i : idx) y.push_back(data.labels[i]);

    const Tensor logits = net.forward(x);
    LossResult lr = cross_entropy(logits, y);
    net.backward(lr.dlogits);
    adam_step(params, adam);

    loss_sum += lr.loss * static_cast<double>(idx.size());
    hits += correct_count(logits, y);
    ++em.steps;
  }
  em.loss = loss_sum / static_cast<double>(data.size());
  em.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  return em;
}

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  bool operator==(const EvalMetrics&) const = default;
};

/// Inference-mode pass in dataset order, batch by batch.
inline EvalMetrics network_evaluate(const Network& net, const Dataset& data,
                                    InferenceFlags flags, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("empty dataset");
  if (batch_size == 0) throw UsageError("batch size must be at least 1");
  double loss_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    const Tensor x = slice_rows(data.inputs, start, end);
    const std::span<const std::size_t> y(data.labels.data() + start, end - start);
    const Tensor logits = net.infer(x, flags);
    loss_sum += cross_entropy(logits, y).loss * static_cast<double>(end - start);
    hits += correct_count(logits, y);
  }
  return {loss_sum / static_cast<double>(data.size()),
          static_cast<double>(hits) / static_cast<double>(data.size())};
}

}  // namespace bln
