#pragma once

// Test-only reference computations. Everything here is written with plain
// loops over std::vector and its own mask rule so it stays independent of the
// Eigen code paths it checks.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pfnlab/model.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

template <class M>
std::vector<double> affine(const M& w, const std::vector<double>& x, const pfnlab::Vec<double>* bias) {
  std::vector<double> out(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    double s = bias ? (*bias)(r) : 0.0;
    for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * x[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = s;
  }
  return out;
}

inline std::vector<double> norm(const std::vector<double>& x, const pfnlab::Vec<double>& g,
                                const pfnlab::Vec<double>& b) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(static_cast<Eigen::Index>(i)) + b(static_cast<Eigen::Index>(i));
  return out;
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0))); }

inline Rows rows_of(const pfnlab::Mat<double>& m) {
  Rows out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

inline Rows embed(const pfnlab::Episode<double>& e, const pfnlab::ModelParams<double>& p) {
  Rows tokens;
  const auto xs = rows_of(e.support_x);
  const auto xq = rows_of(e.query_x);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto z = affine(p.feature_proj, xs[i], nullptr);
    for (std::size_t r = 0; r < z.size(); ++r)
      z[r] += p.label_proj(static_cast<Eigen::Index>(r)) * e.support_y(static_cast<Eigen::Index>(i));
    tokens.push_back(z);
  }
  for (const auto& x : xq) tokens.push_back(affine(p.feature_proj, x, nullptr));
  return tokens;
}

/// Dense masked attention over all token pairs.
inline Rows forward(const pfnlab::Episode<double>& e, const pfnlab::ModelParams<double>& p,
                    const pfnlab::ModelConfig& c) {
  Rows z = embed(e, p);
  const std::size_t ns = e.n_support();
  const std::size_t n = z.size();
  const std::size_t d = c.hidden_dim;
  const std::size_t dh = d / c.n_heads;
  auto allowed = [&](std::size_t i, std::size_t j) { return j < ns || (i >= ns && i == j && c.query_self_attention); };
  for (const auto& l : p.layers) {
    Rows q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = norm(z[i], l.norm1_gain, l.norm1_bias);
      q[i] = affine(l.wq, h, &l.bq);
      k[i] = affine(l.wk, h, &l.bk);
      v[i] = affine(l.wv, h, &l.bv);
    }
    Rows attn(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> w(n, 0.0);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          if (!allowed(i, j)) continue;
          double s = 0;
          for (std::size_t t = head * dh; t < (head + 1) * dh; ++t) s += q[i][t] * k[j][t];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) {
          w[j] = allowed(i, j) ? std::exp(w[j] - mx) : 0.0;
          total += w[j];
        }
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t t = head * dh; t < (head + 1) * dh; ++t) attn[i][t] += w[j] / total * v[j][t];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = affine(l.wo, attn[i], &l.bo);
      for (std::size_t r = 0; r < d; ++r) z[i][r] += o[r];
      const auto h2 = norm(z[i], l.norm2_gain, l.norm2_bias);
      auto u = affine(l.w1, h2, &l.b1);
      for (double& x : u) x = gelu(x);
      const auto f = affine(l.w2, u, &l.b2);
      for (std::size_t r = 0; r < d; ++r) z[i][r] += f[r];
    }
  }
  Rows out;
  for (std::size_t i = ns; i < n; ++i) out.push_back(affine(p.head, norm(z[i], p.final_gain, p.final_bias), &p.head_bias));
  return out;
}

/// Softmax over the first k entries, exp/normalize without shifting.
inline std::vector<double> softmax(const std::vector<double>& logits, std::size_t k) {
  std::vector<double> out(k);
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) total += out[i] = std::exp(logits[i]);
  for (double& v : out) v /= total;
  return out;
}

/// Random parameters with every tensor filled, head included.
inline pfnlab::ModelParams<double> random_params(const pfnlab::ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  auto p = pfnlab::ModelParams<double>::zeros(c);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& t : p.tensors())
    for (auto& x : t.span()) x = u(rng);
  for (auto& l : p.layers) {
    l.norm1_gain.array() += 1.0;
    l.norm2_gain.array() += 1.0;
  }
  p.final_gain.array() += 1.0;
  return p;
}

inline pfnlab::Episode<double> random_episode(std::size_t ns, std::size_t nq, std::size_t width, std::size_t n_classes,
                                              std::uint64_t seed, bool with_labels = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  pfnlab::Episode<double> e;
  e.support_x.resize(static_cast<Eigen::Index>(ns), static_cast<Eigen::Index>(width));
  e.query_x.resize(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(width));
  for (Eigen::Index i = 0; i < e.support_x.size(); ++i) e.support_x.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < e.query_x.size(); ++i) e.query_x.data()[i] = u(rng);
  std::uniform_int_distribution<std::size_t> cls(0, n_classes - 1);
  e.support_y.resize(static_cast<Eigen::Index>(ns));
  for (auto& y : e.support_y) y = static_cast<double>(cls(rng));
  if (with_labels) {
    pfnlab::Vec<double> yq(static_cast<Eigen::Index>(nq));
    for (auto& y : yq) y = static_cast<double>(cls(rng));
    e.query_y = yq;
  }
  e.n_classes = n_classes;
  return e;
}

struct GradCheck {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central differences of `loss_fn` against `analytic` for every parameter.
/// Relative error is |a - f| / max(|a|, |f|, floor).
inline GradCheck finite_difference_check(pfnlab::ModelParams<double> p, const pfnlab::ModelParams<double>& analytic,
                                         const std::function<double(const pfnlab::ModelParams<double>&)>& loss_fn,
                                         double step, double floor) {
  GradCheck res;
  auto params = p.tensors();
  const auto grads = analytic.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Eigen::Index i = 0; i < params[t].size(); ++i) {
      double& x = params[t].data[i];
      const double orig = x;
      x = orig + step;
      const double up = loss_fn(p);
      x = orig - step;
      const double down = loss_fn(p);
      x = orig;
      const double fd = (up - down) / (2 * step);
      const double a = grads[t].data[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = params[t].name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace oracle
