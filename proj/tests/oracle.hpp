#pragma once

// Deliberately naive re-derivations of the normalizer equations with
// scalar loops over nested vectors. Shares no code with include/bln so it
// can serve as an independent check.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

struct Population {
  std::vector<double> mean_b;
  std::vector<double> std_b;
  std::vector<double> var_b;
  double mean_f = 0.0;
  double std_f = 1.0;
  int count = 0;
};

// Training transform, one equation at a time.
inline Matrix bln_train(const Matrix& x, const std::vector<double>& gamma,
                        const std::vector<double>& beta, double eps) {
  const std::size_t m = x.size();
  const std::size_t d = x[0].size();

  std::vector<double> mu_b(d, 0.0);
  for (std::size_t k = 0; k < d; k++) {
    for (std::size_t i = 0; i < m; i++) mu_b[k] = mu_b[k] + x[i][k];
    mu_b[k] = mu_b[k] / m;
  }
  std::vector<double> sigma_b(d, 0.0);
  for (std::size_t k = 0; k < d; k++) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; i++) acc = acc + (x[i][k] - mu_b[k]) * (x[i][k] - mu_b[k]);
    sigma_b[k] = std::sqrt(acc / m + eps);
  }
  std::vector<double> mu_f(m, 0.0);
  for (std::size_t i = 0; i < m; i++) {
    for (std::size_t k = 0; k < d; k++) mu_f[i] = mu_f[i] + x[i][k];
    mu_f[i] = mu_f[i] / d;
  }
  std::vector<double> sigma_f(m, 0.0);
  for (std::size_t i = 0; i < m; i++) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; k++) acc = acc + (x[i][k] - mu_f[i]) * (x[i][k] - mu_f[i]);
    sigma_f[i] = std::sqrt(acc / d);
  }

  Matrix y(m, std::vector<double>(d));
  for (std::size_t i = 0; i < m; i++) {
    for (std::size_t k = 0; k < d; k++) {
      double xhat = (x[i][k] - mu_b[k]) / sigma_b[k];
      double xhathat = 0.0;
      if (sigma_f[i] >= 1e-12) xhathat = (x[i][k] - mu_f[i]) / sigma_f[i];
      double wb = 1.0 - (1.0 / m + eps);
      double wf = 1.0 / m - eps;
      double z = (wb * xhat + wf * xhathat) / std::sqrt((double)d);
      y[i][k] = gamma[k] * z + beta[k];
    }
  }
  return y;
}

// Accumulate one batch into population estimates. momentum < 0 selects
// the cumulative average.
inline void absorb(Population& pop, const Matrix& x, double eps, double momentum) {
  const std::size_t m = x.size();
  const std::size_t d = x[0].size();
  std::vector<double> mean(d, 0.0), sd(d, 0.0), var(d, 0.0);
  for (std::size_t k = 0; k < d; k++) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; i++) s += x[i][k];
    mean[k] = s / m;
    double v = 0.0;
    for (std::size_t i = 0; i < m; i++) v += (x[i][k] - mean[k]) * (x[i][k] - mean[k]);
    var[k] = v / m;
    sd[k] = std::sqrt(v / m + eps);
  }
  double mf = 0.0, sf = 0.0;
  for (std::size_t i = 0; i < m; i++) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; k++) s += x[i][k];
    double mu = s / d;
    double v = 0.0;
    for (std::size_t k = 0; k < d; k++) v += (x[i][k] - mu) * (x[i][k] - mu);
    mf += mu;
    sf += std::sqrt(v / d);
  }
  mf /= m;
  sf /= m;

  if (pop.count == 0) {
    pop.mean_b = mean;
    pop.std_b = sd;
    pop.var_b = var;
    pop.mean_f = mf;
    pop.std_f = sf;
  } else if (momentum < 0) {
    double n = pop.count;
    for (std::size_t k = 0; k < d; k++) {
      pop.mean_b[k] = (n * pop.mean_b[k] + mean[k]) / (n + 1);
      pop.std_b[k] = (n * pop.std_b[k] + sd[k]) / (n + 1);
      pop.var_b[k] = (n * pop.var_b[k] + var[k]) / (n + 1);
    }
    pop.mean_f = (n * pop.mean_f + mf) / (n + 1);
    pop.std_f = (n * pop.std_f + sf) / (n + 1);
  } else {
    for (std::size_t k = 0; k < d; k++) {
      pop.mean_b[k] = momentum * pop.mean_b[k] + (1 - momentum) * mean[k];
      pop.std_b[k] = momentum * pop.std_b[k] + (1 - momentum) * sd[k];
      pop.var_b[k] = momentum * pop.var_b[k] + (1 - momentum) * var[k];
    }
    pop.mean_f = momentum * pop.mean_f + (1 - momentum) * mf;
    pop.std_f = momentum * pop.std_f + (1 - momentum) * sf;
  }
  pop.count++;
}

// Inference transform. True flags read the population; false flags use
// the batch at hand, with each std centered on the selected mean.
inline Matrix bln_infer(const Matrix& x, const std::vector<double>& gamma,
                        const std::vector<double>& beta, double eps, const Population& pop,
                        bool e_b, bool std_b, bool e_f, bool std_f) {
  const std::size_t m = x.size();
  const std::size_t d = x[0].size();
  double factor = 1.0;
  if (m > 1) factor = (double)m / (double)(m - 1);

  std::vector<double> EB(d), SB(d);
  for (std::size_t k = 0; k < d; k++) {
    if (e_b) {
      EB[k] = pop.mean_b[k];
    } else {
      double s = 0.0;
      for (std::size_t i = 0; i < m; i++) s = s + x[i][k];
      EB[k] = s / m;
    }
    if (std_b) {
      SB[k] = factor * pop.std_b[k];
    } else {
      double s = 0.0;
      for (std::size_t i = 0; i < m; i++) s = s + (x[i][k] - EB[k]) * (x[i][k] - EB[k]);
      SB[k] = std::sqrt(s / m + eps);
    }
  }
  std::vector<double> EF(m), SF(m);
  for (std::size_t i = 0; i < m; i++) {
    if (e_f) {
      EF[i] = pop.mean_f;
    } else {
      double s = 0.0;
      for (std::size_t k = 0; k < d; k++) s = s + x[i][k];
      EF[i] = s / d;
    }
    if (std_f) {
      SF[i] = factor * pop.std_f;
    } else {
      double s = 0.0;
      for (std::size_t k = 0; k < d; k++) s = s + (x[i][k] - EF[i]) * (x[i][k] - EF[i]);
      SF[i] = std::sqrt(s / d);
    }
  }

  Matrix y(m, std::vector<double>(d));
  for (std::size_t i = 0; i < m; i++) {
    for (std::size_t k = 0; k < d; k++) {
      double a = (x[i][k] - EB[k]) / SB[k];
      double b = 0.0;
      if (SF[i] >= 1e-12) b = (x[i][k] - EF[i]) / SF[i];
      double wb = 1.0 - (1.0 / m + eps);
      double wf = 1.0 / m - eps;
      y[i][k] = gamma[k] * ((wb * a + wf * b) / std::sqrt((double)d)) + beta[k];
    }
  }
  return y;
}

// Batch-norm inference as a single affine map per feature, with
// Var = m/(m-1) * E[var_B] for training batch size m.
inline Matrix bn_infer(const Matrix& x, const std::vector<double>& gamma,
                       const std::vector<double>& beta, double eps, const Population& pop,
                       std::size_t train_m) {
  Matrix y(x.size(), std::vector<double>(x[0].size()));
  double factor = train_m > 1 ? (double)train_m / (double)(train_m - 1) : 1.0;
  for (std::size_t k = 0; k < x[0].size(); k++) {
    double var = factor * pop.var_b[k];
    double a = gamma[k] / std::sqrt(var + eps);
    double b = beta[k] - gamma[k] * pop.mean_b[k] / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); i++) y[i][k] = a * x[i][k] + b;
  }
  return y;
}

}  // namespace oracle
