#pragma once

// Small synthetic datasets shared by the training and inference tests.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "pfnlab/dataio.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/preprocess.hpp"

namespace fixtures {

/// Two classes split by a random hyperplane through the origin.
inline pfnlab::Dataset separable(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> w(d);
  for (double& x : w) x = g(rng);
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  std::vector<std::string> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += w[j] * (xs[i][j] = g(rng));
    ys[i] = s > 0 ? "pos" : "neg";
  }
  return pfnlab::make_numeric_dataset(xs, ys, pfnlab::TaskKind::classification);
}

/// Noiseless y = w·x.
inline pfnlab::Dataset linear_regression(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> w(d);
  for (double& x : w) x = g(rng);
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  std::vector<std::string> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += w[j] * (xs[i][j] = g(rng));
    ys[i] = pfnlab::format_real(s);
  }
  return pfnlab::make_numeric_dataset(xs, ys, pfnlab::TaskKind::regression);
}

inline pfnlab::ModelConfig tiny_model(pfnlab::TaskKind task = pfnlab::TaskKind::classification) {
  pfnlab::ModelConfig c;
  c.hidden_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.feedforward_dim = 32;
  c.max_features = 8;
  c.max_classes = 4;
  c.task = task;
  return c;
}

struct Prepared {
  pfnlab::Preprocessor pre;
  pfnlab::PreparedSet train;
  pfnlab::PreparedSet test;
};

inline Prepared prepare(const pfnlab::Dataset& d, std::size_t max_features, double fraction = 0.8,
                        std::uint64_t seed = 0) {
  const auto [tr, te] = pfnlab::train_test_split(d, {fraction, seed});
  pfnlab::PreprocessConfig pc;
  pc.max_features = max_features;
  auto pre = pfnlab::Preprocessor::fit(tr, pc);
  return {pre, pre.prepare(tr), pre.prepare(te)};
}

}  // namespace fixtures
