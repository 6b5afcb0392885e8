#pragma once

// Synthetic classification tasks for pretraining: Gaussian-mixture inputs,
// a random two-layer map to a scalar score, and quantile binning of the
// score into class labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pfnlab/dataio.hpp"
#include "pfnlab/error.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/preprocess.hpp"

namespace pfnlab {

using CountRange = std::pair<std::size_t, std::size_t>;

enum class PriorActivation { tanh, identity };

inline const char* to_string(PriorActivation a) { return a == PriorActivation::tanh ? "tanh" : "identity"; }

struct PriorConfig {
  std::size_t min_rows = 200;
  std::size_t max_rows = 500;
  CountRange feature_count_range{2, 12};
  CountRange class_count_range{2, 4};
  CountRange latent_width_range{4, 32};
  CountRange component_count_range{1, 4};
  double component_separation = 2.0;
  double noise_scale = 0.1;
  double discrete_feature_probability = 0.1;
  PriorActivation activation = PriorActivation::tanh;
  std::pair<double, double> support_fraction_range{0.1, 0.9};
  std::uint64_t seed = 0;

  void validate() const {
    auto check_range = [](const CountRange& r, const char* name, std::size_t lo) {
      if (r.first < lo || r.first > r.second)
        fail(ErrorCode::invalid_config, std::string("prior ") + name + " range is invalid");
    };
    if (max_rows > 1000) fail(ErrorCode::invalid_config, "prior max_rows must be at most 1000");
    if (min_rows < 4 || min_rows > max_rows) fail(ErrorCode::invalid_config, "prior row range is invalid");
    check_range(feature_count_range, "feature_count", 1);
    check_range(class_count_range, "class_count", 2);
    if (class_count_range.second > kMaxClasses) fail(ErrorCode::invalid_config, "prior class count exceeds 10");
    check_range(latent_width_range, "latent_width", 1);
    check_range(component_count_range, "component_count", 1);
    if (noise_scale < 0 || component_separation < 0 || discrete_feature_probability < 0 ||
        discrete_feature_probability > 1)
      fail(ErrorCode::invalid_config, "prior scales must be non-negative");
    const auto [flo, fhi] = support_fraction_range;
    if (!(flo > 0 && flo <= fhi && fhi < 1)) fail(ErrorCode::invalid_config, "prior support fraction range is invalid");
  }

  /// Generated tasks must fit the model they pretrain.
  void validate_for(const ModelConfig& m) const {
    validate();
    if (feature_count_range.second > m.max_features)
      fail(ErrorCode::too_many_features, "prior feature count exceeds the model's max_features");
    if (class_count_range.second > m.max_classes)
      fail(ErrorCode::too_many_classes, "prior class count exceeds the model's max_classes");
  }
};

namespace detail {

inline std::size_t draw_count(std::mt19937_64& rng, const CountRange& r) {
  return std::uniform_int_distribution<std::size_t>(r.first, r.second)(rng);
}

inline double draw_uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double draw_normal(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace detail

/// Numeric features plus integer class labels, before conversion to a Dataset.
struct PriorTable {
  std::vector<std::vector<double>> features;
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
};

inline PriorTable sample_prior_table(const PriorConfig& cfg, std::mt19937_64& rng) {
  using detail::draw_normal;
  using detail::draw_uniform;
  const std::size_t n = detail::draw_count(rng, {cfg.min_rows, cfg.max_rows});
  const std::size_t d = detail::draw_count(rng, cfg.feature_count_range);
  const std::size_t k = detail::draw_count(rng, cfg.class_count_range);
  const std::size_t width = detail::draw_count(rng, cfg.latent_width_range);
  const std::size_t n_comp = detail::draw_count(rng, cfg.component_count_range);

  std::vector<std::vector<double>> means(n_comp, std::vector<double>(d));
  std::vector<double> scales(n_comp), weights(n_comp);
  for (std::size_t c = 0; c < n_comp; ++c) {
    for (double& m : means[c]) m = cfg.component_separation * draw_normal(rng);
    scales[c] = draw_uniform(rng, 0.5, 1.5);
    weights[c] = draw_uniform(rng, 0.5, 1.5);
  }

  PriorTable t;
  t.n_classes = k;
  t.features.assign(n, std::vector<double>(d));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  for (auto& row : t.features) {
    const std::size_t c = n_comp == 1 ? 0 : pick(rng);
    for (std::size_t j = 0; j < d; ++j) row[j] = means[c][j] + scales[c] * draw_normal(rng);
  }

  Eigen::MatrixXd w1(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(d));
  Eigen::VectorXd b1(static_cast<Eigen::Index>(width)), w2(static_cast<Eigen::Index>(width));
  for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = draw_normal(rng) / std::sqrt(static_cast<double>(d));
  for (auto& b : b1) b = draw_normal(rng);
  for (auto& w : w2) w = draw_normal(rng) / std::sqrt(static_cast<double>(width));

  std::vector<double> score(n);
  Eigen::VectorXd x(static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(j)) = t.features[r][j];
    Eigen::VectorXd h = w1 * x + b1;
    if (cfg.activation == PriorActivation::tanh) h = h.array().tanh().matrix();
    score[r] = w2.dot(h);
  }
  if (cfg.noise_scale > 0) {
    const double mean = std::accumulate(score.begin(), score.end(), 0.0) / static_cast<double>(n);
    double var = 0;
    for (double s : score) var += (s - mean) * (s - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (double& s : score) s += cfg.noise_scale * sd * draw_normal(rng);
  }

  // Some features become discrete codes: equal-width bins with shuffled codes.
  for (std::size_t j = 0; j < d; ++j) {
    if (draw_uniform(rng, 0.0, 1.0) >= cfg.discrete_feature_probability) continue;
    const std::size_t levels = detail::draw_count(rng, {2, 6});
    std::vector<double> codes(levels);
    std::iota(codes.begin(), codes.end(), 0.0);
    std::shuffle(codes.begin(), codes.end(), rng);
    double lo = t.features[0][j], hi = lo;
    for (const auto& row : t.features) {
      lo = std::min(lo, row[j]);
      hi = std::max(hi, row[j]);
    }
    for (auto& row : t.features) {
      const double u = hi > lo ? (row[j] - lo) / (hi - lo) : 0.0;
      row[j] = codes[std::min(levels - 1, static_cast<std::size_t>(u * static_cast<double>(levels)))];
    }
  }

  // Class proportions, then thresholds at the matching score quantiles.
  std::vector<double> props(k);
  for (double& p : props) p = draw_uniform(rng, 0.5, 1.5);
  const double total = std::accumulate(props.begin(), props.end(), 0.0);
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresholds;
  double cum = 0;
  for (std::size_t c = 0; c + 1 < k; ++c) {
    cum += props[c] / total;
    const auto idx = std::min(n - 1, static_cast<std::size_t>(cum * static_cast<double>(n)));
    thresholds.push_back(sorted[idx]);
  }
  std::vector<std::size_t> relabel(k);
  std::iota(relabel.begin(), relabel.end(), 0);
  std::shuffle(relabel.begin(), relabel.end(), rng);
  t.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto bin = static_cast<std::size_t>(std::upper_bound(thresholds.begin(), thresholds.end(), score[r]) -
                                              thresholds.begin());
    t.labels[r] = relabel[bin];
  }
  return t;
}

inline Dataset prior_table_to_dataset(const PriorTable& t) {
  std::vector<std::string> y;
  y.reserve(t.labels.size());
  for (std::size_t l : t.labels) y.push_back(std::to_string(l));
  return make_numeric_dataset(t.features, y, TaskKind::classification);
}

inline Dataset sample_prior_dataset(const PriorConfig& cfg, std::mt19937_64& rng) {
  return prior_table_to_dataset(sample_prior_table(cfg, rng));
}

/// A prior dataset with a support/query partition of its rows.
struct PriorSplit {
  Dataset data;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  double support_fraction = 0;
  std::size_t attempts = 1;
};

inline bool support_covers_classes(const Dataset& d, std::span<const std::size_t> support) {
  std::vector<std::string> all = d.targets(), sup;
  for (std::size_t r : support) sup.push_back(all[r]);
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::sort(sup.begin(), sup.end());
  sup.erase(std::unique(sup.begin(), sup.end()), sup.end());
  return sup.size() == all.size();
}

/// One raw draw: dataset plus a uniform random partition. May be degenerate.
inline PriorSplit draw_prior_split(const PriorConfig& cfg, std::mt19937_64& rng) {
  PriorSplit s;
  s.data = sample_prior_dataset(cfg, rng);
  s.support_fraction = detail::draw_uniform(rng, cfg.support_fraction_range.first, cfg.support_fraction_range.second);
  const std::size_t n = s.data.n_rows();
  const auto n_s = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(s.support_fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  s.support.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_s));
  s.query.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_s), idx.end());
  std::sort(s.support.begin(), s.support.end());
  std::sort(s.query.begin(), s.query.end());
  return s;
}

inline constexpr std::size_t kPriorMaxAttempts = 1000;

/// Redraws until every class of the dataset appears in the support rows.
inline PriorSplit sample_prior_split(const PriorConfig& cfg, std::mt19937_64& rng) {
  for (std::size_t attempt = 1; attempt <= kPriorMaxAttempts; ++attempt) {
    PriorSplit s = draw_prior_split(cfg, rng);
    if (support_covers_classes(s.data, s.support)) {
      s.attempts = attempt;
      return s;
    }
  }
  fail(ErrorCode::irreducible_degeneracy, "prior kept producing support sets with missing classes");
}

/// Preprocessing is fitted on the support rows only; labels are re-encoded
/// densely in order of first appearance in the support.
template <class T>
Episode<T> episode_from_split(const PriorSplit& s, const PreprocessConfig& pcfg) {
  const Dataset support = s.data.select_rows(s.support);
  const Dataset query = s.data.select_rows(s.query);
  const Preprocessor pre = Preprocessor::fit(support, pcfg);
  const PreparedSet sp = pre.prepare(support);
  const PreparedSet qp = pre.prepare(query);
  std::vector<std::size_t> srows(sp.rows()), qrows(qp.rows());
  std::iota(srows.begin(), srows.end(), 0);
  std::iota(qrows.begin(), qrows.end(), 0);
  return make_episode<T>(sp, srows, qp.features, qrows, &qp.targets);
}

template <class T>
Episode<T> sample_prior_episode(const PriorConfig& cfg, std::mt19937_64& rng, const PreprocessConfig& pcfg = {}) {
  return episode_from_split<T>(sample_prior_split(cfg, rng), pcfg);
}

}  // namespace pfnlab
