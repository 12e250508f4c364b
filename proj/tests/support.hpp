#pragma once

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "advmtl/model.hpp"
#include "advmtl/tensor.hpp"
#include "advmtl/types.hpp"

namespace advmtl::testing {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                            double scale = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = n(rng);
  return Tensor::matrix(rows, cols, std::move(v), requires_grad);
}

inline Matrix random_features(std::size_t T, std::size_t F, std::mt19937_64& rng) {
  return Matrix::from_tensor(random_matrix(T, F, rng, 0.5));
}

/// Row-normalized log-probabilities (T x C) with random logits.
inline Matrix random_logp(std::size_t T, std::size_t C, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    double mx = -1e300;
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, m(t, c) = n(rng));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(m(t, c) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) m(t, c) -= lse;
  }
  return m;
}

/// ||a - b|| / max(||a||, ||b||), with a floor so all-zero pairs compare equal.
inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

// P(collapsed output == s) for every reachable s, by enumerating all paths.
inline std::map<Transcript, double> enumerate_outputs(const Matrix& logp) {
  const std::size_t T = logp.rows, K = logp.cols;
  const int blank = static_cast<int>(K) - 1;
  std::map<Transcript, double> out;
  std::vector<int> path(T, 0);
  while (true) {
    double lp = 0.0;
    Transcript s;
    int prev = -1;
    for (std::size_t t = 0; t < T; ++t) {
      lp += logp(t, path[t]);
      if (path[t] != blank && path[t] != prev) s.push_back(path[t]);
      prev = path[t];
    }
    out[s] += std::exp(lp);
    std::size_t i = 0;
    while (i < T && ++path[i] == static_cast<int>(K)) path[i++] = 0;
    if (i == T) break;
  }
  return out;
}

inline double brute_prefix(const std::map<Transcript, double>& outputs, const Transcript& g) {
  double p = 0.0;
  for (const auto& [s, q] : outputs)
    if (s.size() >= g.size() && std::equal(g.begin(), g.end(), s.begin())) p += q;
  return p;
}

/// A model small enough for finite differences over every parameter.
inline ModelConfig tiny_config(std::size_t vocab_size = 3) {
  ModelConfig c;
  c.feat_dim = 3;
  c.enc_hidden = 4;
  c.enc_layers = 2;
  c.dec_hidden = 4;
  c.attn_dim = 3;
  c.vocab_size = vocab_size;
  c.disc_layers = 5;
  c.disc_hidden = 3;
  c.n_accents = 2;
  c.seed = 11;
  return c;
}

/// Central differences of f with respect to one named parameter, using the
/// library's fd_gradient oracle. The parameter's values are restored.
inline Tensor fd_param_gradient(ModelParams& params, const std::string& name,
                                const std::function<double()>& f, double h = 1e-5) {
  Tensor& p = params.at(name);
  const std::vector<double> saved(p.values().begin(), p.values().end());
  const Tensor probe = p.clone();
  Tensor g = fd_gradient(
      [&](const Tensor& x) {
        std::copy(x.values().begin(), x.values().end(), p.mutable_values().begin());
        return f();
      },
      probe, h);
  std::copy(saved.begin(), saved.end(), p.mutable_values().begin());
  return g;
}

/// Analytic gradient of a scalar loss with respect to every parameter, then a
/// finite-difference comparison per tensor. Returns the worst relative error.
inline double worst_param_rel_err(ModelParams& params,
                                  const std::function<Tensor()>& loss, double h = 1e-5) {
  params.zero_grad();
  {
    Tape::Scope scope;
    backward(loss());
  }
  double worst = 0.0;
  for (auto& [name, t] : params.tensors()) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const Tensor numeric = fd_param_gradient(params, name, [&] {
      NoGradGuard ng;
      return loss().item();
    }, h);
    worst = std::max(worst, rel_err(analytic, numeric.values()));
  }
  params.zero_grad();
  return worst;
}

}  // namespace advmtl::testing
