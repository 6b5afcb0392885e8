#pragma once

// Tabular dataset ingestion: CSV parsing, schema validation and
// deterministic train/test partitioning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pfnlab/error.hpp"

namespace pfnlab {

inline constexpr std::size_t kMaxClasses = 10;
inline constexpr std::size_t kDefaultMaxFeatures = 100;

enum class TaskKind { classification, regression };
enum class ColumnKind { numeric, categorical };

inline const char* to_string(TaskKind t) {
  return t == TaskKind::classification ? "classification" : "regression";
}
inline const char* to_string(ColumnKind k) {
  return k == ColumnKind::numeric ? "numeric" : "categorical";
}

struct ColumnSchema {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  bool is_target = false;

  bool operator==(const ColumnSchema&) const = default;
};

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

inline bool is_missing_cell(std::string_view cell) { return cell.empty() || cell == "NA"; }

/// Shortest text that parses back to exactly `v`.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_real(std::string_view text, double& out) {
  if (text.empty()) return false;
  const char* first = text.data();
  if (*first == '+') ++first;
  auto res = std::from_chars(first, text.data() + text.size(), out);
  return res.ec == std::errc() && res.ptr == text.data() + text.size();
}

/// A table of raw cells plus a parsed numeric view.
///
/// Cells keep their original text so that categorical values survive until
/// preprocessing and so that a CSV round trip is lossless. Missing cells
/// (empty or "NA") are flagged in the mask; their numeric value is NaN.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<ColumnSchema> schema, TaskKind task, std::vector<std::string> cells,
          std::size_t max_features = kDefaultMaxFeatures)
      : schema_(std::move(schema)), task_(task), cells_(std::move(cells)) {
    validate_schema(max_features);
    if (schema_.empty() || cells_.size() % schema_.size() != 0) {
      fail(ErrorCode::schema_mismatch, "cell count is not a multiple of the column count");
    }
    n_rows_ = cells_.size() / schema_.size();
    parse_cells();
  }

  const std::vector<ColumnSchema>& schema() const { return schema_; }
  TaskKind task() const { return task_; }
  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_columns() const { return schema_.size(); }
  std::size_t n_features() const { return schema_.size() - 1; }
  std::size_t target_column() const { return target_; }

  /// Column indices of the features, in schema order.
  std::vector<std::size_t> feature_columns() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < schema_.size(); ++c)
      if (c != target_) out.push_back(c);
    return out;
  }

  const std::string& cell(std::size_t r, std::size_t c) const { return cells_[r * n_columns() + c]; }
  bool missing(std::size_t r, std::size_t c) const { return missing_[r * n_columns() + c] != 0; }
  /// NaN for missing cells and for categorical columns.
  double value(std::size_t r, std::size_t c) const { return values_[r * n_columns() + c]; }

  std::vector<std::string> column_text(std::size_t c) const {
    std::vector<std::string> out(n_rows_);
    for (std::size_t r = 0; r < n_rows_; ++r) out[r] = cell(r, c);
    return out;
  }
  std::vector<double> column_values(std::size_t c) const {
    std::vector<double> out(n_rows_);
    for (std::size_t r = 0; r < n_rows_; ++r) out[r] = value(r, c);
    return out;
  }
  std::vector<std::string> targets() const { return column_text(target_); }

  std::size_t n_distinct_targets() const {
    std::set<std::string> seen;
    for (std::size_t r = 0; r < n_rows_; ++r) seen.insert(cell(r, target_));
    return seen.size();
  }

  bool has_categorical_features() const {
    for (std::size_t c : feature_columns())
      if (schema_[c].kind == ColumnKind::categorical) return true;
    return false;
  }

  Dataset select_rows(std::span<const std::size_t> rows) const {
    Dataset out;
    out.schema_ = schema_;
    out.task_ = task_;
    out.target_ = target_;
    out.n_rows_ = rows.size();
    const std::size_t w = n_columns();
    out.cells_.reserve(rows.size() * w);
    out.values_.reserve(rows.size() * w);
    out.missing_.reserve(rows.size() * w);
    for (std::size_t r : rows) {
      if (r >= n_rows_) fail(ErrorCode::dimension_mismatch, "row index out of range");
      for (std::size_t c = 0; c < w; ++c) {
        out.cells_.push_back(cells_[r * w + c]);
        out.values_.push_back(values_[r * w + c]);
        out.missing_.push_back(missing_[r * w + c]);
      }
    }
    return out;
  }

  bool operator==(const Dataset& o) const {
    return schema_ == o.schema_ && task_ == o.task_ && cells_ == o.cells_ && missing_ == o.missing_;
  }

 private:
  void validate_schema(std::size_t max_features) {
    std::set<std::string> names;
    std::size_t n_targets = 0;
    for (std::size_t c = 0; c < schema_.size(); ++c) {
      if (!names.insert(schema_[c].name).second)
        fail(ErrorCode::schema_mismatch, "duplicate column name '" + schema_[c].name + "'");
      if (schema_[c].is_target) {
        ++n_targets;
        target_ = c;
      }
    }
    if (n_targets != 1)
      fail(ErrorCode::schema_mismatch,
           "schema must have exactly one target column, found " + std::to_string(n_targets));
    if (schema_.size() - 1 > max_features)
      fail(ErrorCode::too_many_features, std::to_string(schema_.size() - 1) + " features exceed the maximum of " +
                                             std::to_string(max_features));
  }

  void parse_cells() {
    const std::size_t w = n_columns();
    values_.assign(cells_.size(), std::numeric_limits<double>::quiet_NaN());
    missing_.assign(cells_.size(), 0);
    for (std::size_t r = 0; r < n_rows_; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::string& text = cells_[r * w + c];
        if (is_missing_cell(text)) {
          if (c == target_)
            fail(ErrorCode::parse_error, "missing target at row " + std::to_string(r) + ", column " +
                                             std::to_string(c));
          missing_[r * w + c] = 1;
          continue;
        }
        if (schema_[c].kind != ColumnKind::numeric) continue;
        double v = 0.0;
        if (!parse_real(text, v) || !std::isfinite(v))
          fail(ErrorCode::parse_error, "non-numeric value '" + text + "' at row " + std::to_string(r) +
                                           ", column " + std::to_string(c) + " (" + schema_[c].name + ")");
        values_[r * w + c] = v;
      }
    }
    if (task_ == TaskKind::classification) {
      const std::size_t k = n_distinct_targets();
      if (k > kMaxClasses)
        fail(ErrorCode::too_many_classes,
             std::to_string(k) + " distinct target values exceed the maximum of " + std::to_string(kMaxClasses));
    } else if (schema_[target_].kind != ColumnKind::numeric) {
      fail(ErrorCode::schema_mismatch, "regression target must be a numeric column");
    }
  }

  std::vector<ColumnSchema> schema_;
  TaskKind task_ = TaskKind::classification;
  std::size_t target_ = 0;
  std::size_t n_rows_ = 0;
  std::vector<std::string> cells_;
  std::vector<double> values_;
  std::vector<std::uint8_t> missing_;
};

// ---------------------------------------------------------------------------
// CSV (RFC 4180)

namespace csv {

/// Splits a whole document into records. Quoted fields may contain commas,
/// doubled quotes and line breaks. CRLF and LF are both accepted.
inline std::vector<std::vector<std::string>> parse(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;
  for (; i < text.size(); ++i) {
    const char ch = text[i];
    if (in_quotes) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    switch (ch) {
      case '"':
        if (field_started && !field.empty())
          fail(ErrorCode::parse_error, "stray quote inside unquoted field on record " +
                                           std::to_string(records.size()));
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        end_record();
        break;
      case '\n':
        end_record();
        break;
      default:
        field.push_back(ch);
        field_started = true;
    }
  }
  if (in_quotes) fail(ErrorCode::parse_error, "unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

inline std::string quote(std::string_view cell) {
  const bool needs = cell.find_first_of(",\"\r\n") != std::string_view::npos ||
                     (!cell.empty() && (cell.front() == ' ' || cell.back() == ' '));
  if (!needs) return std::string(cell);
  std::string out = "\"";
  for (char ch : cell) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

}  // namespace csv

inline std::string read_text_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::file_not_found, path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_error, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Dataset load_dataset_csv(const std::filesystem::path& path, const std::vector<ColumnSchema>& schema,
                                TaskKind task, std::size_t max_features = kDefaultMaxFeatures) {
  const auto records = csv::parse(read_text_file(path));
  if (records.empty()) fail(ErrorCode::schema_mismatch, "row 0: missing header in " + path.string());
  const auto& header = records.front();
  if (header.size() != schema.size())
    fail(ErrorCode::schema_mismatch, "row 0: header has " + std::to_string(header.size()) +
                                         " columns, schema has " + std::to_string(schema.size()));
  for (std::size_t c = 0; c < schema.size(); ++c)
    if (header[c] != schema[c].name)
      fail(ErrorCode::schema_mismatch,
           "row 0: header column " + std::to_string(c) + " is '" + header[c] + "', expected '" + schema[c].name + "'");

  std::vector<std::string> cells;
  cells.reserve((records.size() - 1) * schema.size());
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    // A trailing blank line parses as a single empty field.
    if (rec.size() == 1 && rec[0].empty() && schema.size() > 1) continue;
    if (rec.size() != schema.size())
      fail(ErrorCode::schema_mismatch, "row " + std::to_string(r - 1) + ": expected " +
                                           std::to_string(schema.size()) + " fields, found " +
                                           std::to_string(rec.size()));
    cells.insert(cells.end(), rec.begin(), rec.end());
  }
  return Dataset(schema, task, std::move(cells), max_features);
}

inline void write_dataset_csv(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_error, "cannot write " + path.string());
  for (std::size_t c = 0; c < d.n_columns(); ++c) {
    if (c) out << ',';
    out << csv::quote(d.schema()[c].name);
  }
  out << '\n';
  for (std::size_t r = 0; r < d.n_rows(); ++r) {
    for (std::size_t c = 0; c < d.n_columns(); ++c) {
      if (c) out << ',';
      out << csv::quote(d.cell(r, c));
    }
    out << '\n';
  }
  if (!out) fail(ErrorCode::io_error, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Row-index partition for `n_rows` rows. Both sides are sorted ascending.
inline SplitIndices split_indices(std::size_t n_rows, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    fail(ErrorCode::degenerate_split, "train_fraction must lie in (0,1)");
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n_rows)));
  if (n_rows < 2 || n_train == 0 || n_train >= n_rows)
    fail(ErrorCode::degenerate_split, "splitting " + std::to_string(n_rows) + " rows at fraction " +
                                          format_real(spec.train_fraction) + " leaves an empty side");
  std::vector<std::size_t> perm(n_rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

inline std::pair<Dataset, Dataset> train_test_split(const Dataset& d, const SplitSpec& spec) {
  const auto idx = split_indices(d.n_rows(), spec);
  return {d.select_rows(idx.train), d.select_rows(idx.test)};
}

/// Builds a dataset from numeric feature columns and textual targets.
inline Dataset make_numeric_dataset(const std::vector<std::vector<double>>& features,
                                    const std::vector<std::string>& targets, TaskKind task,
                                    std::size_t max_features = kDefaultMaxFeatures) {
  const std::size_t n_features = features.empty() ? 0 : features.front().size();
  std::vector<ColumnSchema> schema;
  for (std::size_t j = 0; j < n_features; ++j) schema.push_back({"f" + std::to_string(j), ColumnKind::numeric, false});
  schema.push_back({"target", task == TaskKind::classification ? ColumnKind::categorical : ColumnKind::numeric, true});
  if (features.size() != targets.size()) fail(ErrorCode::length_mismatch, "features and targets differ in length");
  std::vector<std::string> cells;
  cells.reserve(features.size() * (n_features + 1));
  for (std::size_t r = 0; r < features.size(); ++r) {
    if (features[r].size() != n_features) fail(ErrorCode::schema_mismatch, "ragged feature rows");
    for (double v : features[r]) cells.push_back(std::isnan(v) ? std::string("NA") : format_real(v));
    cells.push_back(targets[r]);
  }
  return Dataset(std::move(schema), task, std::move(cells), max_features);
}

}  // namespace pfnlab
