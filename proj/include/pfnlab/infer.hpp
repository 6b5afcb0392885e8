#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "pfnlab/error.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/preprocess.hpp"

namespace pfnlab {

enum class InferenceMode { full_context, ensemble };

inline const char* to_string(InferenceMode m) { return m == InferenceMode::full_context ? "full_context" : "ensemble"; }

struct InferenceConfig {
  InferenceMode mode = InferenceMode::full_context;
  std::size_t support_budget = 10000;
  std::size_t subset_size = 1000;
  double subset_fraction = 0.0;  // > 0 overrides subset_size with a share of the training rows
  std::size_t n_ensembles = 10;
  std::uint64_t seed = 0;
  bool per_observation_subsets = false;
  std::size_t query_chunk = 1024;

  std::size_t resolved_subset_size(std::size_t n_train) const {
    if (subset_fraction > 0)
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(subset_fraction * static_cast<double>(n_train))));
    return subset_size;
  }
};

/// Class probabilities (n_test × K) for classification, values (transformed
/// target space) for regression.
struct Predictions {
  TaskKind task = TaskKind::classification;
  Eigen::MatrixXd probabilities;
  std::vector<double> values;

  std::size_t rows() const {
    return task == TaskKind::classification ? static_cast<std::size_t>(probabilities.rows()) : values.size();
  }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out(static_cast<std::size_t>(probabilities.rows()));
    for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
      Eigen::Index best = 0;
      probabilities.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    }
    return out;
  }
};

/// Runs the model with `support_rows` of `train` as context for every row of
/// `test`. Classes absent from the support get probability 0.
template <class T>
Predictions predict_with_support(const ModelParams<T>& params, const ModelConfig& cfg, const PreparedSet& train,
                                 std::span<const std::size_t> support_rows, const ProcessedMatrix& test,
                                 std::size_t query_chunk = 1024) {
  if (support_rows.empty()) fail(ErrorCode::dimension_mismatch, "support set is empty");
  if (test.rows() == 0) fail(ErrorCode::dimension_mismatch, "no test rows to predict");
  Predictions out;
  out.task = cfg.task;
  const std::size_t k = train.n_classes;
  std::vector<bool> present(k, false);
  if (cfg.task == TaskKind::classification) {
    if (k == 0 || k > cfg.max_classes)
      fail(ErrorCode::too_many_classes, std::to_string(k) + " classes do not fit the model head");
    for (std::size_t r : support_rows) present[static_cast<std::size_t>(train.targets[r])] = true;
    out.probabilities = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(test.rows()), static_cast<Eigen::Index>(k));
  } else {
    out.values.resize(test.rows());
  }
  const std::size_t chunk = query_chunk == 0 ? test.rows() : query_chunk;
  std::vector<std::size_t> qrows;
  for (std::size_t start = 0; start < test.rows(); start += chunk) {
    const std::size_t stop = std::min(test.rows(), start + chunk);
    qrows.resize(stop - start);
    std::iota(qrows.begin(), qrows.end(), start);
    const Episode<T> e = make_episode<T>(train, support_rows, test, qrows);
    const Mat<T> logits = forward(e, params, cfg);
    for (std::size_t i = 0; i < qrows.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const auto dst = static_cast<Eigen::Index>(start + i);
      if (cfg.task == TaskKind::regression) {
        out.values[start + i] = static_cast<double>(logits(row, 0));
        continue;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c)
        if (present[c]) mx = std::max(mx, static_cast<double>(logits(row, static_cast<Eigen::Index>(c))));
      double total = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double p = present[c] ? std::exp(static_cast<double>(logits(row, static_cast<Eigen::Index>(c))) - mx) : 0.0;
        out.probabilities(dst, static_cast<Eigen::Index>(c)) = p;
        total += p;
      }
      out.probabilities.row(dst) /= total;
    }
  }
  return out;
}

template <class T>
Predictions predict_full_context(const ModelParams<T>& params, const ModelConfig& cfg, const PreparedSet& train,
                                 const ProcessedMatrix& test, const InferenceConfig& icfg = {}) {
  if (train.rows() > icfg.support_budget)
    fail(ErrorCode::support_budget_exceeded,
         std::to_string(train.rows()) + " training rows exceed the support budget of " +
             std::to_string(icfg.support_budget) + "; use ensemble mode");
  std::vector<std::size_t> all(train.rows());
  std::iota(all.begin(), all.end(), 0);
  return predict_with_support(params, cfg, train, all, test, icfg.query_chunk);
}

/// One sorted subset of training rows per ensemble member, drawn without
/// replacement from a generator seeded with `seed`.
inline std::vector<std::vector<std::size_t>> draw_ensemble_subsets(std::size_t n_train, std::size_t subset_size,
                                                                   std::size_t n_members, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> idx(n_train);
  for (std::size_t e = 0; e < n_members; ++e) {
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < subset_size; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n_train - 1)(rng);
      std::swap(idx[i], idx[j]);
    }
    std::vector<std::size_t> subset(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(subset_size));
    std::sort(subset.begin(), subset.end());
    out.push_back(std::move(subset));
  }
  return out;
}

/// Arithmetic mean in member order; probability rows are renormalized.
inline Predictions average_predictions(std::span<const Predictions> members) {
  if (members.empty()) fail(ErrorCode::invalid_config, "nothing to average");
  Predictions out = members.front();
  for (std::size_t m = 1; m < members.size(); ++m) {
    if (members[m].rows() != out.rows()) fail(ErrorCode::length_mismatch, "ensemble members disagree in row count");
    if (out.task == TaskKind::classification)
      out.probabilities += members[m].probabilities;
    else
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += members[m].values[i];
  }
  const double n = static_cast<double>(members.size());
  if (out.task == TaskKind::classification) {
    out.probabilities /= n;
    for (Eigen::Index i = 0; i < out.probabilities.rows(); ++i) out.probabilities.row(i) /= out.probabilities.row(i).sum();
  } else {
    for (double& v : out.values) v /= n;
  }
  return out;
}

template <class T>
Predictions predict_ensembled(const ModelParams<T>& params, const ModelConfig& cfg, const PreparedSet& train,
                              const ProcessedMatrix& test, const InferenceConfig& icfg) {
  const std::size_t m = icfg.resolved_subset_size(train.rows());
  if (icfg.n_ensembles == 0) fail(ErrorCode::invalid_config, "n_ensembles must be at least 1");
  if (m == 0 || m > train.rows())
    fail(ErrorCode::invalid_config, "subset_size " + std::to_string(m) + " exceeds the " +
                                        std::to_string(train.rows()) + " training rows");
  if (m > icfg.support_budget)
    fail(ErrorCode::support_budget_exceeded, "subset_size exceeds the support budget");

  if (!icfg.per_observation_subsets) {
    const auto subsets = draw_ensemble_subsets(train.rows(), m, icfg.n_ensembles, icfg.seed);
    std::vector<Predictions> members;
    for (const auto& s : subsets) members.push_back(predict_with_support(params, cfg, train, s, test, icfg.query_chunk));
    return average_predictions(members);
  }

  // Fresh subsets for every test row: one seed stream per row.
  Predictions out;
  out.task = cfg.task;
  if (cfg.task == TaskKind::classification)
    out.probabilities.resize(static_cast<Eigen::Index>(test.rows()), static_cast<Eigen::Index>(train.n_classes));
  else
    out.values.resize(test.rows());
  for (std::size_t i = 0; i < test.rows(); ++i) {
    const std::size_t row[] = {i};
    const ProcessedMatrix one = test.select_rows(row);
    const auto subsets = draw_ensemble_subsets(train.rows(), m, icfg.n_ensembles, icfg.seed + 0x9e3779b97f4a7c15ull * (i + 1));
    std::vector<Predictions> members;
    for (const auto& s : subsets) members.push_back(predict_with_support(params, cfg, train, s, one, 1));
    const Predictions avg = average_predictions(members);
    if (cfg.task == TaskKind::classification)
      out.probabilities.row(static_cast<Eigen::Index>(i)) = avg.probabilities.row(0);
    else
      out.values[i] = avg.values[0];
  }
  return out;
}

template <class T>
Predictions predict(const ModelParams<T>& params, const ModelConfig& cfg, const PreparedSet& train,
                    const ProcessedMatrix& test, const InferenceConfig& icfg) {
  return icfg.mode == InferenceMode::full_context ? predict_full_context(params, cfg, train, test, icfg)
                                                  : predict_ensembled(params, cfg, train, test, icfg);
}

}  // namespace pfnlab
