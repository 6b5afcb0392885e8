#pragma once

// Feature and target transformations: per-variable quantile maps, ordinal
// codes for categoricals, row scaling by d_f / d_f^i with zero padding, and
// label encoding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "pfnlab/dataio.hpp"
#include "pfnlab/error.hpp"

namespace pfnlab {

enum class QuantileOutput { uniform, gaussian };

inline constexpr double kGaussianRankClip = 1e-6;

struct QuantileKnot {
  double value = 0.0;
  double rank = 0.0;
  bool operator==(const QuantileKnot&) const = default;
};

class QuantileMap {
 public:
  QuantileMap() = default;

  /// Empirical quantiles of the non-NaN entries at `n_quantiles` evenly
  /// spaced ranks (linear interpolation between order statistics). Knots
  /// sharing an input value are merged and take the mean of their ranks.
  static QuantileMap fit(std::span<const double> values, std::size_t n_quantiles,
                         QuantileOutput output = QuantileOutput::uniform) {
    std::vector<double> sorted;
    sorted.reserve(values.size());
    for (double v : values)
      if (!std::isnan(v)) sorted.push_back(v);
    if (sorted.empty()) fail(ErrorCode::empty_column, "cannot fit a quantile map on an all-missing column");
    std::sort(sorted.begin(), sorted.end());
    if (n_quantiles == 0) n_quantiles = std::min<std::size_t>(1000, sorted.size());

    QuantileMap m;
    m.n_quantiles_ = n_quantiles;
    m.output_ = output;
    const double last = static_cast<double>(sorted.size() - 1);
    for (std::size_t j = 0; j < n_quantiles; ++j) {
      const double rank = n_quantiles == 1 ? 0.5 : static_cast<double>(j) / static_cast<double>(n_quantiles - 1);
      const double pos = rank * last;
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
      const double frac = pos - static_cast<double>(lo);
      const double value = frac == 0.0 ? sorted[lo] : sorted[lo] + frac * (sorted[hi] - sorted[lo]);
      m.knots_.push_back({value, rank});
    }

    std::vector<QuantileKnot> merged;
    for (std::size_t i = 0; i < m.knots_.size();) {
      std::size_t j = i;
      double rank_sum = 0.0;
      while (j < m.knots_.size() && m.knots_[j].value == m.knots_[i].value) rank_sum += m.knots_[j++].rank;
      merged.push_back({m.knots_[i].value, rank_sum / static_cast<double>(j - i)});
      i = j;
    }
    if (merged.size() == 1) merged.front().rank = 0.5;
    m.knots_ = std::move(merged);
    return m;
  }

  /// Rank in [0,1]; NaN passes through as NaN.
  double rank(double x) const {
    if (std::isnan(x)) return x;
    if (knots_.size() == 1) return 0.5;
    if (x < knots_.front().value) return 0.0;
    if (x > knots_.back().value) return 1.0;
    auto it = std::upper_bound(knots_.begin(), knots_.end(), x,
                               [](double v, const QuantileKnot& k) { return v < k.value; });
    if (it == knots_.end()) return knots_.back().rank;
    const QuantileKnot& hi = *it;
    const QuantileKnot& lo = *(it - 1);
    if (x == lo.value) return lo.rank;
    const double t = (x - lo.value) / (hi.value - lo.value);
    return lo.rank + t * (hi.rank - lo.rank);
  }

  double operator()(double x) const {
    const double r = rank(x);
    if (output_ == QuantileOutput::uniform || std::isnan(r)) return r;
    const double clipped = std::clamp(r, kGaussianRankClip, 1.0 - kGaussianRankClip);
    return boost::math::quantile(boost::math::normal_distribution<double>(), clipped);
  }

  /// Maps a transformed value back to the input scale (piecewise-linear
  /// inverse, clamped to the fitted range).
  double inverse(double y) const {
    if (std::isnan(y)) return y;
    if (knots_.size() == 1) return knots_.front().value;
    double r = y;
    if (output_ == QuantileOutput::gaussian) r = boost::math::cdf(boost::math::normal_distribution<double>(), y);
    if (r <= knots_.front().rank) return knots_.front().value;
    if (r >= knots_.back().rank) return knots_.back().value;
    auto it = std::upper_bound(knots_.begin(), knots_.end(), r,
                               [](double v, const QuantileKnot& k) { return v < k.rank; });
    const QuantileKnot& hi = *it;
    const QuantileKnot& lo = *(it - 1);
    const double t = (r - lo.rank) / (hi.rank - lo.rank);
    return lo.value + t * (hi.value - lo.value);
  }

  const std::vector<QuantileKnot>& knots() const { return knots_; }
  std::size_t n_quantiles() const { return n_quantiles_; }
  QuantileOutput output() const { return output_; }

 private:
  std::vector<QuantileKnot> knots_;
  std::size_t n_quantiles_ = 0;
  QuantileOutput output_ = QuantileOutput::uniform;
};

inline QuantileMap fit_quantile_map(std::span<const double> values, std::size_t n_quantiles,
                                    QuantileOutput output = QuantileOutput::uniform) {
  return QuantileMap::fit(values, n_quantiles, output);
}

inline double apply_quantile_map(const QuantileMap& m, double x) { return m(x); }

// ---------------------------------------------------------------------------

/// Features of n rows padded to the model width. Each stored row is already
/// multiplied by d_f / d_f^i.
struct ProcessedMatrix {
  Eigen::MatrixXd values;
  std::vector<std::size_t> effective_counts;
  std::size_t n_features = 0;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }

  ProcessedMatrix select_rows(std::span<const std::size_t> rows) const {
    ProcessedMatrix out;
    out.n_features = n_features;
    out.values.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
    out.effective_counts.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows[i]));
      out.effective_counts.push_back(effective_counts[rows[i]]);
    }
    return out;
  }
};

struct PaddedRow {
  std::vector<double> values;
  std::size_t effective_count = 0;
};

/// `missing` may be empty, in which case only NaN entries count as missing.
inline PaddedRow scale_and_pad(std::span<const double> row, std::span<const std::uint8_t> missing,
                               std::size_t max_features) {
  if (row.size() > max_features)
    fail(ErrorCode::dimension_mismatch,
         std::to_string(row.size()) + " features exceed max_features " + std::to_string(max_features));
  if (!missing.empty() && missing.size() != row.size())
    fail(ErrorCode::dimension_mismatch, "missing mask length differs from row length");
  PaddedRow out;
  out.values.assign(max_features, 0.0);
  for (std::size_t j = 0; j < row.size(); ++j) {
    const bool absent = (!missing.empty() && missing[j]) || std::isnan(row[j]);
    if (absent) continue;
    out.values[j] = row[j];
    ++out.effective_count;
  }
  if (out.effective_count == 0) fail(ErrorCode::all_features_missing, "row has no observed features");
  if (out.effective_count != row.size()) {
    const double scale = static_cast<double>(row.size()) / static_cast<double>(out.effective_count);
    for (std::size_t j = 0; j < row.size(); ++j) out.values[j] *= scale;
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Dense class indices in first-appearance order.
class LabelEncoder {
 public:
  static LabelEncoder fit(std::span<const std::string> labels) {
    LabelEncoder e;
    for (const auto& l : labels) {
      if (e.index_.contains(l)) continue;
      e.index_.emplace(l, e.classes_.size());
      e.classes_.push_back(l);
    }
    if (e.classes_.size() > kMaxClasses)
      fail(ErrorCode::too_many_classes, std::to_string(e.classes_.size()) + " classes exceed the maximum of " +
                                            std::to_string(kMaxClasses));
    return e;
  }

  std::size_t encode(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) fail(ErrorCode::unseen_label, "label '" + label + "' was not seen during fitting");
    return it->second;
  }
  bool contains(const std::string& label) const { return index_.contains(label); }
  const std::string& decode(std::size_t idx) const { return classes_.at(idx); }
  std::size_t size() const { return classes_.size(); }
  const std::vector<std::string>& classes() const { return classes_; }

 private:
  std::vector<std::string> classes_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Ordinal codes for a categorical column; unseen values become missing.
class CategoryEncoder {
 public:
  static CategoryEncoder fit(std::span<const std::string> values) {
    CategoryEncoder e;
    for (const auto& v : values) {
      if (is_missing_cell(v) || e.index_.contains(v)) continue;
      e.index_.emplace(v, static_cast<double>(e.index_.size()));
    }
    return e;
  }

  /// NaN for missing or unseen values.
  double encode(const std::string& v) const {
    if (is_missing_cell(v)) return std::numeric_limits<double>::quiet_NaN();
    auto it = index_.find(v);
    return it == index_.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  }
  std::vector<double> encode(std::span<const std::string> values) const {
    std::vector<double> out;
    out.reserve(values.size());
    for (const auto& v : values) out.push_back(encode(v));
    return out;
  }
  std::size_t size() const { return index_.size(); }

 private:
  std::unordered_map<std::string, double> index_;
};

inline std::vector<double> encode_categoricals(std::span<const std::string> column) {
  return CategoryEncoder::fit(column).encode(column);
}

// ---------------------------------------------------------------------------

struct PreprocessConfig {
  std::size_t n_quantiles = 0;  // 0 selects min(1000, n_train_rows)
  QuantileOutput feature_output = QuantileOutput::uniform;
  QuantileOutput target_output = QuantileOutput::uniform;
  std::size_t max_features = kDefaultMaxFeatures;
};

/// A dataset ready for the model: processed features and encoded targets
/// (class indices, or quantile-transformed reals for regression).
struct PreparedSet {
  ProcessedMatrix features;
  std::vector<double> targets;
  TaskKind task = TaskKind::classification;
  std::size_t n_classes = 0;

  std::size_t rows() const { return features.rows(); }

  PreparedSet select_rows(std::span<const std::size_t> rows) const {
    PreparedSet out;
    out.features = features.select_rows(rows);
    out.task = task;
    out.n_classes = n_classes;
    out.targets.reserve(rows.size());
    for (std::size_t r : rows) out.targets.push_back(targets[r]);
    return out;
  }
};

/// Fitted preprocessing state. Fitting sees only training rows; applying it
/// is const.
class Preprocessor {
 public:
  static Preprocessor fit(const Dataset& train, const PreprocessConfig& cfg = {}) {
    if (train.n_features() > cfg.max_features)
      fail(ErrorCode::too_many_features, std::to_string(train.n_features()) + " features exceed max_features " +
                                             std::to_string(cfg.max_features));
    Preprocessor p;
    p.cfg_ = cfg;
    p.task_ = train.task();
    p.schema_ = train.schema();
    const std::size_t nq = cfg.n_quantiles ? cfg.n_quantiles : std::min<std::size_t>(1000, train.n_rows());
    for (std::size_t c : train.feature_columns()) {
      Column col;
      col.index = c;
      std::vector<double> raw;
      if (train.schema()[c].kind == ColumnKind::categorical) {
        const auto text = train.column_text(c);
        col.categories = CategoryEncoder::fit(text);
        raw = col.categories->encode(text);
      } else {
        raw = train.column_values(c);
      }
      col.map = QuantileMap::fit(raw, nq, cfg.feature_output);
      p.columns_.push_back(std::move(col));
    }
    const auto targets = train.targets();
    if (p.task_ == TaskKind::classification) {
      p.labels_ = LabelEncoder::fit(targets);
    } else {
      p.target_map_ = QuantileMap::fit(train.column_values(train.target_column()), nq, cfg.target_output);
    }
    return p;
  }

  ProcessedMatrix transform_features(const Dataset& d) const {
    check_schema(d);
    const std::size_t n_features = columns_.size();
    ProcessedMatrix out;
    out.n_features = n_features;
    out.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d.n_rows()),
                                       static_cast<Eigen::Index>(cfg_.max_features));
    out.effective_counts.resize(d.n_rows());
    std::vector<double> row(n_features);
    for (std::size_t r = 0; r < d.n_rows(); ++r) {
      for (std::size_t j = 0; j < n_features; ++j) {
        const Column& col = columns_[j];
        const double raw = col.categories ? col.categories->encode(d.cell(r, col.index)) : d.value(r, col.index);
        row[j] = col.map(raw);
      }
      PaddedRow padded = scale_and_pad(row, {}, cfg_.max_features);
      for (std::size_t j = 0; j < cfg_.max_features; ++j)
        out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = padded.values[j];
      out.effective_counts[r] = padded.effective_count;
    }
    return out;
  }

  std::vector<double> transform_targets(const Dataset& d) const {
    check_schema(d);
    std::vector<double> out(d.n_rows());
    for (std::size_t r = 0; r < d.n_rows(); ++r) {
      if (task_ == TaskKind::classification)
        out[r] = static_cast<double>(labels_.encode(d.cell(r, d.target_column())));
      else
        out[r] = (*target_map_)(d.value(r, d.target_column()));
    }
    return out;
  }

  PreparedSet prepare(const Dataset& d) const {
    PreparedSet s;
    s.features = transform_features(d);
    s.targets = transform_targets(d);
    s.task = task_;
    s.n_classes = n_classes();
    return s;
  }

  /// Back to the original target scale (regression only).
  double decode_target(double y) const { return target_map_ ? target_map_->inverse(y) : y; }

  TaskKind task() const { return task_; }
  std::size_t n_classes() const { return task_ == TaskKind::classification ? labels_.size() : 0; }
  std::size_t n_features() const { return columns_.size(); }
  const LabelEncoder& labels() const { return labels_; }
  const std::optional<QuantileMap>& target_map() const { return target_map_; }
  const QuantileMap& feature_map(std::size_t j) const { return columns_.at(j).map; }
  const PreprocessConfig& config() const { return cfg_; }

 private:
  struct Column {
    std::size_t index = 0;
    std::optional<CategoryEncoder> categories;
    QuantileMap map;
  };

  void check_schema(const Dataset& d) const {
    if (d.schema() != schema_) fail(ErrorCode::schema_mismatch, "dataset schema differs from the fitted schema");
  }

  PreprocessConfig cfg_;
  TaskKind task_ = TaskKind::classification;
  std::vector<ColumnSchema> schema_;
  std::vector<Column> columns_;
  LabelEncoder labels_;
  std::optional<QuantileMap> target_map_;
};

}  // namespace pfnlab
