#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include "pfnlab/error.hpp"

namespace pfnlab {

struct Metrics {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double r2 = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_test = 0;
};

inline Metrics accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> truth) {
  if (preds.size() != truth.size() || preds.empty())
    fail(ErrorCode::length_mismatch, "accuracy needs equal non-empty prediction and truth lists");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truth[i];
  Metrics m;
  m.n_test = preds.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  return m;
}

/// 1 - SS_res / SS_tot. When the truth is constant the score is 1 for an
/// exact prediction and 0 otherwise.
inline Metrics r2_score(std::span<const double> preds, std::span<const double> truth) {
  if (preds.size() != truth.size() || truth.size() < 2)
    fail(ErrorCode::length_mismatch, "r2_score needs equal prediction and truth lists of length >= 2");
  double mean = 0;
  for (double y : truth) mean += y;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - preds[i]) * (truth[i] - preds[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  Metrics m;
  m.n_test = truth.size();
  if (ss_tot == 0.0)
    m.r2 = ss_res == 0.0 ? 1.0 : 0.0;
  else
    m.r2 = 1.0 - ss_res / ss_tot;
  return m;
}

}  // namespace pfnlab
