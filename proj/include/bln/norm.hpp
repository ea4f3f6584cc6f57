#pragma once

// Batch normalization, layer normalization and batch layer normalization
// (BLN): statistics, training and inference forwards, running statistics
// and analytic backward passes.
//
// Every normalizer views its input as (m, d): m samples along the leading
// axis, d = product of the remaining dimensions. Outputs and input
// gradients are restored to the original shape.

#include <cmath>
#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "bln/error.hpp"
#include "bln/tensor.hpp"

namespace bln {

inline constexpr double kDefaultEpsilon = 1e-4;

/// Feature standard deviations below this are treated as zero: the
/// feature-normalized row is set to 0 (its numerator is 0 as well).
inline constexpr double kSigmaGuard = 1e-12;

enum class NormKind { batch, layer, batch_layer };

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::batch: return "bn";
    case NormKind::layer: return "ln";
    case NormKind::batch_layer: return "bln";
  }
  return "?";
}

/// Moving-average rule for population statistics. The first absorbed
/// batch always initializes the estimates directly.
struct Momentum {
  bool cumulative = false;
  double value = 0.9;

  static Momentum exponential(double m) {
    if (!(m > 0.0 && m <= 1.0)) throw UsageError("momentum must lie in (0, 1]");
    return {false, m};
  }
  static Momentum cumulative_average() { return {true, 0.0}; }

  bool operator==(const Momentum&) const = default;
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
  double epsilon = kDefaultEpsilon;
  Momentum momentum;

  /// gamma = 1, beta = 0.
  static NormParams identity(std::size_t d, double epsilon = kDefaultEpsilon,
                             Momentum momentum = {}) {
    if (!(epsilon > 0.0)) throw UsageError("epsilon must be positive");
    return {ones({d}), zeros({d}), epsilon, momentum};
  }

  std::size_t features() const { return gamma.size(); }
};

/// Per-feature statistics over the batch axis. sigma_b has epsilon inside
/// the square root; var_b is the plain biased variance.
struct BatchStats {
  Tensor mu_b;
  Tensor sigma_b;
  Tensor var_b;
};

/// Per-sample statistics over the feature axis (no epsilon).
struct FeatureStats {
  Tensor mu_f;
  Tensor sigma_f;
};

/// Population estimates. Feature statistics are kept as scalars: the
/// batch-mean of mu_f and sigma_f, since sample indices do not carry over
/// between batches.
struct RunningStats {
  Tensor e_mu_b;
  Tensor e_sigma_b;
  Tensor e_var_b;
  double e_mu_f = 0.0;
  double e_sigma_f = 1.0;
  std::size_t count = 0;
  std::size_t batch_size = 0;  // size of the last absorbed batch

  static RunningStats initial(std::size_t d) {
    return {zeros({d}), ones({d}), ones({d}), 0.0, 1.0, 0, 0};
  }

  bool operator==(const RunningStats&) const = default;
};

/// Population (true) vs current-batch (false) choice for each of the four
/// inference statistics.
struct InferenceFlags {
  bool e_b = false;
  bool std_b = false;
  bool e_f = false;
  bool std_f = false;

  bool any() const { return e_b || std_b || e_f || std_f; }
  auto operator<=>(const InferenceFlags&) const = default;

  static InferenceFlags all(bool v) { return {v, v, v, v}; }
};

/// Intermediates saved by a training forward for the matching backward.
struct NormCache {
  NormKind kind = NormKind::batch;
  Shape input_shape;
  Tensor x_hat;       // batch-normalized (bn, bln) or feature-normalized (ln)
  Tensor x_hathat;    // feature-normalized (bln only)
  Tensor normalized;  // pre-affine output
  std::vector<double> sigma_b;
  std::vector<double> sigma_f;
  std::vector<char> guarded;  // rows whose feature sigma hit the guard
  double w_b = 0.0;
  double w_f = 0.0;
  Tensor gamma;
};

struct NormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

struct TrainForward {
  Tensor y;
  NormCache cache;
  RunningStats running;
};

namespace detail {

inline Tensor as_matrix(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("normalizer input needs a batch axis (rank >= 2)");
  return flatten2d(x);
}

inline void check_params(const NormParams& p, std::size_t d) {
  if (p.gamma.size() != d || p.beta.size() != d)
    throw ShapeError("gamma/beta length " + std::to_string(p.gamma.size()) +
                     " does not match feature size " + std::to_string(d));
  if (!(p.epsilon > 0.0)) throw UsageError("epsilon must be positive");
}

inline void check_running(const RunningStats& r, std::size_t d) {
  if (r.e_mu_b.size() != d || r.e_sigma_b.size() != d || r.e_var_b.size() != d)
    throw ShapeError("running statistics do not match feature size " + std::to_string(d));
}

/// m/(m-1) sample-size correction; undefined for m = 1, where it is
/// taken as 1.
inline double bessel(std::size_t m) {
  return m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
}

inline Tensor affine(const Tensor& n, const NormParams& p) {
  Tensor y(n.shape());
  const std::size_t m = n.dim(0), d = n.dim(1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k)
      y.at(i, k) = p.gamma[k] * n.at(i, k) + p.beta[k];
  return y;
}

// dL/dx for n = (x - mean_col(x)) / sigma_col, sigma_col = sqrt(var + c).
inline void batch_branch_backward(const Tensor& g, const Tensor& x_hat,
                                  const std::vector<double>& sigma, Tensor& dx) {
  const std::size_t m = g.dim(0), d = g.dim(1);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < d; ++k) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      mean_g += g.at(i, k);
      mean_gx += g.at(i, k) * x_hat.at(i, k);
    }
    mean_g *= inv_m;
    mean_gx *= inv_m;
    for (std::size_t i = 0; i < m; ++i)
      dx.at(i, k) += (g.at(i, k) - mean_g - x_hat.at(i, k) * mean_gx) / sigma[k];
  }
}

// Same derivative taken along each row; guarded rows contribute nothing.
inline void feature_branch_backward(const Tensor& g, const Tensor& x_hh,
                                    const std::vector<double>& sigma,
                                    const std::vector<char>& guarded, Tensor& dx) {
  const std::size_t m = g.dim(0), d = g.dim(1);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < m; ++i) {
    if (!guarded.empty() && guarded[i]) continue;
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      mean_g += g.at(i, k);
      mean_gx += g.at(i, k) * x_hh.at(i, k);
    }
    mean_g *= inv_d;
    mean_gx *= inv_d;
    for (std::size_t k = 0; k < d; ++k)
      dx.at(i, k) += (g.at(i, k) - mean_g - x_hh.at(i, k) * mean_gx) / sigma[i];
  }
}

}  // namespace detail

inline BatchStats batch_stats(const Tensor& input, double epsilon) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  BatchStats s{zeros({d}), zeros({d}), zeros({d})};
  for (std::size_t k = 0; k < d; ++k) {
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += x.at(i, k);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (x.at(i, k) - mu) * (x.at(i, k) - mu);
    var /= static_cast<double>(m);
    s.mu_b[k] = mu;
    s.var_b[k] = var;
    s.sigma_b[k] = std::sqrt(var + epsilon);
  }
  return s;
}

inline FeatureStats feature_stats(const Tensor& input) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  FeatureStats s{zeros({m}), zeros({m})};
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += x.at(i, k);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (x.at(i, k) - mu) * (x.at(i, k) - mu);
    var /= static_cast<double>(d);
    s.mu_f[i] = mu;
    s.sigma_f[i] = std::sqrt(var);
  }
  return s;
}

/// Weights on the batch- and feature-normalized activations for batch
/// size m: w_b = 1 - (1/m + eps), w_f = 1/m - eps.
struct BlnWeights {
  double w_b;
  double w_f;
};

inline BlnWeights bln_weights(std::size_t m, double epsilon) {
  if (m == 0) throw ShapeError("batch size must be at least 1");
  // Algebraically w_b = 1 - (1/m + eps) and w_f = 1/m - eps. This grouping
  // keeps w_b + w_f == 1 - 2 eps and w_b(1) == -eps exact in doubles.
  const double w_b = (1.0 - 1.0 / static_cast<double>(m)) - epsilon;
  return {w_b, (1.0 - 2.0 * epsilon) - w_b};
}

inline RunningStats update_running(const RunningStats& running, const BatchStats& bs,
                                   const FeatureStats& fs, Momentum momentum,
                                   std::size_t batch_size) {
  detail::check_running(running, bs.mu_b.size());
  RunningStats out = running;
  const double mu_f = sum(fs.mu_f) / static_cast<double>(fs.mu_f.size());
  const double sigma_f = sum(fs.sigma_f) / static_cast<double>(fs.sigma_f.size());

  if (running.count == 0) {
    out.e_mu_b = bs.mu_b;
    out.e_sigma_b = bs.sigma_b;
    out.e_var_b = bs.var_b;
    out.e_mu_f = mu_f;
    out.e_sigma_f = sigma_f;
  } else {
    const double n = static_cast<double>(running.count);
    auto blend = [&](double e, double s) {
      return momentum.cumulative ? (n * e + s) / (n + 1.0)
                                 : momentum.value * e + (1.0 - momentum.value) * s;
    };
    for (std::size_t k = 0; k < out.e_mu_b.size(); ++k) {
      out.e_mu_b[k] = blend(running.e_mu_b[k], bs.mu_b[k]);
      out.e_sigma_b[k] = blend(running.e_sigma_b[k], bs.sigma_b[k]);
      out.e_var_b[k] = blend(running.e_var_b[k], bs.var_b[k]);
    }
    out.e_mu_f = blend(running.e_mu_f, mu_f);
    out.e_sigma_f = blend(running.e_sigma_f, sigma_f);
  }
  out.count = running.count + 1;
  out.batch_size = batch_size;
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

inline TrainForward bn_forward_train(const Tensor& input, const NormParams& p,
                                     const RunningStats& running) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  detail::check_params(p, d);
  const BatchStats bs = batch_stats(x, p.epsilon);

  NormCache c;
  c.kind = NormKind::batch;
  c.input_shape = input.shape();
  c.x_hat = Tensor({m, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k)
      c.x_hat.at(i, k) = (x.at(i, k) - bs.mu_b[k]) / bs.sigma_b[k];
  c.sigma_b = bs.sigma_b.values();
  c.normalized = c.x_hat;
  c.gamma = p.gamma;

  Tensor y = reshape(detail::affine(c.x_hat, p), input.shape());
  RunningStats r = update_running(running, bs, feature_stats(x), p.momentum, m);
  return {std::move(y), std::move(c), std::move(r)};
}

/// Inference with population statistics: Var = m/(m-1) * E[var_B], m the
/// training batch size.
inline Tensor bn_forward_infer(const Tensor& input, const NormParams& p,
                               const RunningStats& running) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  detail::check_params(p, d);
  detail::check_running(running, d);
  if (running.count == 0) throw DataError("uninitialized population statistics");
  const double correction = detail::bessel(running.batch_size);
  Tensor y({m, d});
  for (std::size_t k = 0; k < d; ++k) {
    const double var = correction * running.e_var_b[k];
    const double denom = std::sqrt(var + p.epsilon);
    const double slope = p.gamma[k] / denom;
    const double shift = p.beta[k] - p.gamma[k] * running.e_mu_b[k] / denom;
    for (std::size_t i = 0; i < m; ++i) y.at(i, k) = slope * x.at(i, k) + shift;
  }
  return reshape(y, input.shape());
}

// ---------------------------------------------------------------------------
// Layer normalization (epsilon inside the square root)

inline TrainForward ln_forward(const Tensor& input, const NormParams& p) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  detail::check_params(p, d);
  const FeatureStats fs = feature_stats(x);

  NormCache c;
  c.kind = NormKind::layer;
  c.input_shape = input.shape();
  c.x_hat = Tensor({m, d});
  c.sigma_f.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double s = std::sqrt(fs.sigma_f[i] * fs.sigma_f[i] + p.epsilon);
    c.sigma_f[i] = s;
    for (std::size_t k = 0; k < d; ++k) c.x_hat.at(i, k) = (x.at(i, k) - fs.mu_f[i]) / s;
  }
  c.normalized = c.x_hat;
  c.gamma = p.gamma;
  Tensor y = reshape(detail::affine(c.x_hat, p), input.shape());
  return {std::move(y), std::move(c), RunningStats{}};
}

// ---------------------------------------------------------------------------
// Batch layer normalization

/// Training transform: batch- and feature-normalize, blend with the
/// batch-size weights, divide by sqrt(d), then scale and shift.
inline TrainForward bln_forward_train(const Tensor& input, const NormParams& p,
                                      const RunningStats& running) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  detail::check_params(p, d);
  const BatchStats bs = batch_stats(x, p.epsilon);
  const FeatureStats fs = feature_stats(x);
  const BlnWeights w = bln_weights(m, p.epsilon);
  const double root_d = std::sqrt(static_cast<double>(d));

  NormCache c;
  c.kind = NormKind::batch_layer;
  c.input_shape = input.shape();
  c.x_hat = Tensor({m, d});
  c.x_hathat = Tensor({m, d});
  c.normalized = Tensor({m, d});
  c.sigma_b = bs.sigma_b.values();
  c.sigma_f = fs.sigma_f.values();
  c.guarded.assign(m, 0);
  c.w_b = w.w_b;
  c.w_f = w.w_f;
  c.gamma = p.gamma;

  for (std::size_t i = 0; i < m; ++i) {
    c.guarded[i] = fs.sigma_f[i] < kSigmaGuard;
    for (std::size_t k = 0; k < d; ++k) {
      const double xb = (x.at(i, k) - bs.mu_b[k]) / bs.sigma_b[k];
      const double xf = c.guarded[i] ? 0.0 : (x.at(i, k) - fs.mu_f[i]) / fs.sigma_f[i];
      c.x_hat.at(i, k) = xb;
      c.x_hathat.at(i, k) = xf;
      c.normalized.at(i, k) = (w.w_b * xb + w.w_f * xf) / root_d;
    }
  }

  Tensor y = reshape(detail::affine(c.normalized, p), input.shape());
  RunningStats r = update_running(running, bs, fs, p.momentum, m);
  return {std::move(y), std::move(c), std::move(r)};
}

/// Inference transform with frozen parameters. Each flag picks the
/// population estimate (true) or the current batch statistic (false); the
/// current-batch standard deviations are taken around whichever mean the
/// corresponding mean flag selected. Population standard deviations carry
/// the m/(m-1) factor, m being the current batch size.
inline Tensor bln_forward_infer(const Tensor& input, const NormParams& p,
                                const RunningStats& running, InferenceFlags flags) {
  const Tensor x = detail::as_matrix(input);
  const std::size_t m = x.dim(0), d = x.dim(1);
  detail::check_params(p, d);
  if (flags.any()) {
    detail::check_running(running, d);
    if (running.count == 0) throw DataError("uninitialized population statistics");
  }
  const double correction = detail::bessel(m);
  const BlnWeights w = bln_weights(m, p.epsilon);
  const double root_d = std::sqrt(static_cast<double>(d));

  std::vector<double> e_b(d), std_b(d);
  for (std::size_t k = 0; k < d; ++k) {
    if (flags.e_b) {
      e_b[k] = running.e_mu_b[k];
    } else {
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += x.at(i, k);
      e_b[k] = mu / static_cast<double>(m);
    }
    if (flags.std_b) {
      std_b[k] = correction * running.e_sigma_b[k];
    } else {
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) var += (x.at(i, k) - e_b[k]) * (x.at(i, k) - e_b[k]);
      std_b[k] = std::sqrt(var / static_cast<double>(m) + p.epsilon);
    }
  }

  Tensor n({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    double e_f;
    if (flags.e_f) {
      e_f = running.e_mu_f;
    } else {
      double mu = 0.0;
      for (std::size_t k = 0; k < d; ++k) mu += x.at(i, k);
      e_f = mu / static_cast<double>(d);
    }
    double std_f;
    if (flags.std_f) {
      std_f = correction * running.e_sigma_f;
    } else {
      double var = 0.0;
      for (std::size_t k = 0; k < d; ++k) var += (x.at(i, k) - e_f) * (x.at(i, k) - e_f);
      std_f = std::sqrt(var / static_cast<double>(d));
    }
    const bool guarded = std_f < kSigmaGuard;
    for (std::size_t k = 0; k < d; ++k) {
      const double xb = (x.at(i, k) - e_b[k]) / std_b[k];
      const double xf = guarded ? 0.0 : (x.at(i, k) - e_f) / std_f;
      n.at(i, k) = (w.w_b * xb + w.w_f * xf) / root_d;
    }
  }
  return reshape(detail::affine(n, p), input.shape());
}

// ---------------------------------------------------------------------------
// Backward passes

namespace detail {

inline NormGrads affine_backward(const NormCache& c, const Tensor& dy_in, Tensor& g) {
  const Tensor dy = as_matrix(dy_in);
  if (dy.shape() != c.normalized.shape())
    throw ShapeError("dy shape " + shape_str(dy_in.shape()) + " does not match cache");
  const std::size_t m = dy.dim(0), d = dy.dim(1);
  NormGrads out{Tensor({m, d}), zeros({d}), zeros({d})};
  g = Tensor({m, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      out.dbeta[k] += dy.at(i, k);
      out.dgamma[k] += dy.at(i, k) * c.normalized.at(i, k);
      g.at(i, k) = dy.at(i, k) * c.gamma[k];
    }
  return out;
}

}  // namespace detail

inline NormGrads bn_backward(const NormCache& c, const Tensor& dy) {
  if (c.kind != NormKind::batch) throw Error("bn_backward needs a batch-norm cache");
  Tensor g;
  NormGrads out = detail::affine_backward(c, dy, g);
  detail::batch_branch_backward(g, c.x_hat, c.sigma_b, out.dx);
  out.dx = reshape(out.dx, c.input_shape);
  return out;
}

inline NormGrads ln_backward(const NormCache& c, const Tensor& dy) {
  if (c.kind != NormKind::layer) throw Error("ln_backward needs a layer-norm cache");
  Tensor g;
  NormGrads out = detail::affine_backward(c, dy, g);
  detail::feature_branch_backward(g, c.x_hat, c.sigma_f, {}, out.dx);
  out.dx = reshape(out.dx, c.input_shape);
  return out;
}

inline NormGrads bln_backward(const NormCache& c, const Tensor& dy) {
  if (c.kind != NormKind::batch_layer) throw Error("bln_backward needs a BLN cache");
  Tensor g;
  NormGrads out = detail::affine_backward(c, dy, g);
  const double root_d = std::sqrt(static_cast<double>(g.dim(1)));
  detail::batch_branch_backward(scale(g, c.w_b / root_d), c.x_hat, c.sigma_b, out.dx);
  detail::feature_branch_backward(scale(g, c.w_f / root_d), c.x_hathat, c.sigma_f,
                                  c.guarded, out.dx);
  out.dx = reshape(out.dx, c.input_shape);
  return out;
}

inline NormGrads norm_backward(const NormCache& c, const Tensor& dy) {
  switch (c.kind) {
    case NormKind::batch: return bn_backward(c, dy);
    case NormKind::layer: return ln_backward(c, dy);
    case NormKind::batch_layer: return bln_backward(c, dy);
  }
  throw Error("unknown normalizer kind");
}

}  // namespace bln
