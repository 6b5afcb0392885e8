#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "pfnlab/dataio.hpp"
#include "pfnlab/error.hpp"
#include "pfnlab/infer.hpp"
#include "pfnlab/metrics.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/preprocess.hpp"
#include "pfnlab/suite.hpp"
#include "pfnlab/train.hpp"

namespace pfnlab {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ScoreEntry {
  std::string dataset;
  std::string category;
  std::string variant;
  double raw = kNaN;  // NaN marks a failed cell
  double normalized = kNaN;
  std::vector<double> seed_scores;
  std::string error;

  bool failed() const { return !std::isfinite(raw); }
};

struct ScoreTable {
  std::vector<ScoreEntry> entries;

  std::vector<std::string> variants() const { return distinct(&ScoreEntry::variant); }
  std::vector<std::string> datasets() const { return distinct(&ScoreEntry::dataset); }

  const ScoreEntry* find(const std::string& dataset, const std::string& variant) const {
    for (const auto& e : entries)
      if (e.dataset == dataset && e.variant == variant) return &e;
    return nullptr;
  }

  /// Mean normalized score of `variant` over datasets whose category starts
  /// with `category_prefix`. NaN when no dataset qualifies.
  double aggregate(const std::string& variant, const std::string& category_prefix = "") const {
    double total = 0;
    std::size_t n = 0;
    for (const auto& e : entries) {
      if (e.variant != variant || e.category.rfind(category_prefix, 0) != 0 || !std::isfinite(e.normalized)) continue;
      total += e.normalized;
      ++n;
    }
    return n ? total / static_cast<double>(n) : kNaN;
  }

 private:
  std::vector<std::string> distinct(std::string ScoreEntry::*field) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (std::find(out.begin(), out.end(), e.*field) == out.end()) out.push_back(e.*field);
    return out;
  }
};

/// Per-dataset min-max across variants. Failed cells are left out of the
/// range and keep a NaN normalized score; a dataset where all surviving
/// variants tie maps them all to 1.
inline ScoreTable normalize_scores(ScoreTable t, std::size_t min_variants = 2,
                                   std::vector<std::string>* warnings = nullptr) {
  if (t.variants().size() < min_variants)
    fail(ErrorCode::insufficient_variants, "normalization needs at least " + std::to_string(min_variants) +
                                               " variants, got " + std::to_string(t.variants().size()));
  for (const auto& ds : t.datasets()) {
    double lo = INFINITY, hi = -INFINITY;
    std::size_t ok = 0;
    for (const auto& e : t.entries)
      if (e.dataset == ds && !e.failed()) {
        lo = std::min(lo, e.raw);
        hi = std::max(hi, e.raw);
        ++ok;
      }
    for (auto& e : t.entries) {
      if (e.dataset != ds) continue;
      if (e.failed()) {
        e.normalized = kNaN;
        if (warnings) warnings->push_back("excluded failed cell " + ds + " / " + e.variant + ": " + e.error);
        continue;
      }
      e.normalized = hi > lo ? (e.raw - lo) / (hi - lo) : 1.0;
    }
    if (ok < min_variants && warnings)
      warnings->push_back("dataset " + ds + " has only " + std::to_string(ok) + " successful variant(s)");
  }
  return t;
}

// ---------------------------------------------------------------------------

enum class VariantMethod { scratch, icl, finetune };

struct VariantSpec {
  std::string name;
  VariantMethod method = VariantMethod::icl;
  InferenceConfig inference;
  std::size_t finetune_episode_rows = 0;
  double finetune_episode_fraction = 0;  // > 0: rows per fine-tune episode as a share of the train split
  std::string retrieval = "10k";

  bool uses_pretraining() const { return method != VariantMethod::scratch; }
  bool uses_training() const { return method != VariantMethod::icl; }
};

/// The five rows of the comparison table. "10k" variants use the whole
/// training split as context; "1k" variants ensemble over subsets holding
/// `subset_fraction` of it (1k out of 10k at full scale).
inline std::vector<VariantSpec> table_variants(double subset_fraction = 0.1, std::size_t n_ensembles = 10) {
  InferenceConfig full;
  InferenceConfig sub;
  sub.mode = InferenceMode::ensemble;
  sub.subset_fraction = subset_fraction;
  sub.n_ensembles = n_ensembles;
  return {
      {"Scratch-10k", VariantMethod::scratch, full, 0, 0, "10k"},
      {"ICL-1k", VariantMethod::icl, sub, 0, 0, "1k"},
      {"ICL-10k", VariantMethod::icl, full, 0, 0, "10k"},
      {"Fine-tune-1k", VariantMethod::finetune, sub, 0, subset_fraction, "1k"},
      {"Fine-tune-10k", VariantMethod::finetune, full, 0, 0, "10k"},
  };
}

inline VariantSpec find_variant(const std::string& name, double subset_fraction = 0.1, std::size_t n_ensembles = 10) {
  for (auto& v : table_variants(subset_fraction, n_ensembles)) {
    std::string a = v.name, b = name;
    auto lower = [](std::string& s) {
      for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    };
    lower(a);
    lower(b);
    if (a == b) return v;
  }
  fail(ErrorCode::invalid_config, "unknown variant '" + name +
                                      "' (expected Scratch-10k, ICL-1k, ICL-10k, Fine-tune-1k or Fine-tune-10k)");
}

struct BenchSetup {
  ModelConfig model;  // architecture; the task is taken from each dataset
  const ModelParams<float>* pretrained = nullptr;
  TrainConfig finetune = TrainConfig::for_regime(Regime::finetune);
  TrainConfig scratch = TrainConfig::for_regime(Regime::scratch);
  PreprocessConfig preprocess;
  double train_fraction = 0.8;
  std::vector<std::uint64_t> seeds = {0};
  std::function<void(const std::string&)> progress;
};

/// One dataset under one seed, preprocessed once and shared by all variants.
struct PreparedTask {
  Preprocessor pre;
  PreparedSet train_all;  // support at test time
  PreparedSet train_fit;  // fine-tune resplits
  PreparedSet validation;  // early stopping
  ProcessedMatrix test_features;
  std::vector<std::size_t> test_labels;  // classification; SIZE_MAX for labels unseen in training
  std::vector<double> test_values;       // regression, original scale
};

inline PreparedTask prepare_task(const Dataset& d, const PreprocessConfig& pcfg, double train_fraction,
                                 double validation_fraction, std::uint64_t seed) {
  const auto [train, test] = train_test_split(d, {train_fraction, seed});
  const auto inner = split_indices(train.n_rows(), {1.0 - validation_fraction, seed + 1});
  PreparedTask t{Preprocessor::fit(train, pcfg), {}, {}, {}, {}, {}, {}};
  t.train_all = t.pre.prepare(train);
  t.train_fit = t.train_all.select_rows(inner.train);
  t.validation = t.train_all.select_rows(inner.test);
  t.test_features = t.pre.transform_features(test);
  const std::size_t tc = test.target_column();
  for (std::size_t r = 0; r < test.n_rows(); ++r) {
    if (d.task() == TaskKind::classification) {
      const std::string& label = test.cell(r, tc);
      t.test_labels.push_back(t.pre.labels().contains(label) ? t.pre.labels().encode(label)
                                                             : std::numeric_limits<std::size_t>::max());
    } else {
      t.test_values.push_back(test.value(r, tc));
    }
  }
  return t;
}

/// Accuracy, or R² on the original target scale.
inline double score_predictions(const PreparedTask& t, const Predictions& p) {
  if (p.task == TaskKind::classification) return accuracy(p.labels(), t.test_labels).accuracy;
  std::vector<double> decoded;
  for (double v : p.values) decoded.push_back(t.pre.decode_target(v));
  return r2_score(decoded, t.test_values).r2;
}

/// Trains (if the variant trains) and scores one variant on one prepared task.
inline double run_variant(const PreparedTask& t, const VariantSpec& v, const BenchSetup& setup, std::uint64_t seed) {
  ModelConfig mcfg = setup.model;
  mcfg.task = t.train_all.task;
  InferenceConfig icfg = v.inference;
  icfg.seed = seed;
  ModelParams<float> params;
  if (v.uses_pretraining()) {
    if (!setup.pretrained) fail(ErrorCode::invalid_config, "variant " + v.name + " needs a pretrained checkpoint");
    params = mcfg.task == TaskKind::classification ? *setup.pretrained : adapt_head(*setup.pretrained, mcfg);
  }
  if (v.method == VariantMethod::finetune) {
    TrainConfig cfg = setup.finetune;
    cfg.seed = seed;
    cfg.episode_rows = v.finetune_episode_fraction > 0
                           ? static_cast<std::size_t>(std::llround(v.finetune_episode_fraction *
                                                                   static_cast<double>(t.train_fit.rows())))
                           : v.finetune_episode_rows;
    params = finetune(params, t.train_fit, t.validation, mcfg, cfg).params;
  } else if (v.method == VariantMethod::scratch) {
    TrainConfig cfg = setup.scratch;
    cfg.seed = seed;
    params = train_scratch<float>(t.train_fit, t.validation, mcfg, cfg).params;
  }
  return score_predictions(t, predict(params, mcfg, t.train_all, t.test_features, icfg));
}

struct CompareResult {
  ScoreTable table;
  std::string text;
  std::vector<std::string> warnings;
};

inline std::string format_score(double v) {
  if (!std::isfinite(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

/// Aligned plain-text table: one row per variant, one score column per
/// dataset category.
inline std::string render_table(const ScoreTable& t, const std::vector<VariantSpec>& variants) {
  const std::vector<std::string> cats = {"classification/mixed", "classification/numerical", "regression/mixed",
                                         "regression/numerical"};
  std::vector<std::vector<std::string>> rows = {
      {"Method", "Pretrain", "Fine-tune", "#Retrieval", "Cls mixed", "Cls numerical", "Reg mixed", "Reg numerical"}};
  for (const auto& v : variants) {
    std::string method = v.method == VariantMethod::scratch ? "Scratch" : v.method == VariantMethod::icl ? "ICL" : "Fine-tune";
    std::vector<std::string> row = {method, v.uses_pretraining() ? "yes" : "no", v.uses_training() ? "yes" : "no",
                                    v.retrieval};
    for (const auto& c : cats) row.push_back(format_score(t.aggregate(v.name, c)));
    rows.push_back(row);
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::string out;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t i = 0; i < rows[ri].size(); ++i) {
      out += rows[ri][i];
      if (i + 1 < rows[ri].size()) out += std::string(width[i] - rows[ri][i].size() + 2, ' ');
    }
    out += '\n';
    if (ri == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + '\n';
    }
  }
  return out;
}

/// Every variant on every dataset, averaged over setup.seeds, then
/// normalized per dataset.
inline CompareResult compare_variants(const std::vector<BenchTask>& tasks, const std::vector<VariantSpec>& variants,
                                      const BenchSetup& setup) {
  if (variants.empty()) fail(ErrorCode::insufficient_variants, "no variants to compare");
  if (setup.seeds.empty()) fail(ErrorCode::invalid_config, "at least one seed is required");
  CompareResult res;
  for (const auto& task : tasks) {
    std::vector<ScoreEntry> cells;
    for (const auto& v : variants) cells.push_back({task.id, task.category(), v.name, 0.0, kNaN, {}, {}});
    for (std::uint64_t seed : setup.seeds) {
      std::optional<PreparedTask> prepared;
      try {
        prepared = prepare_task(task.data, setup.preprocess, setup.train_fraction, setup.finetune.validation_fraction, seed);
      } catch (const Error& e) {
        for (auto& c : cells) c.error = e.what();
      }
      for (std::size_t i = 0; i < variants.size(); ++i) {
        if (!cells[i].error.empty()) continue;
        try {
          const double s = run_variant(*prepared, variants[i], setup, seed);
          cells[i].seed_scores.push_back(s);
          if (setup.progress) setup.progress(task.id + " seed " + std::to_string(seed) + " " + variants[i].name + " " + format_score(s));
        } catch (const Error& e) {
          cells[i].error = e.what();
          if (setup.progress) setup.progress(task.id + " " + variants[i].name + " failed: " + e.what());
        }
      }
    }
    for (auto& c : cells) {
      if (!c.error.empty()) {
        c.raw = kNaN;
        continue;
      }
      double total = 0;
      for (double s : c.seed_scores) total += s;
      c.raw = total / static_cast<double>(c.seed_scores.size());
    }
    res.table.entries.insert(res.table.entries.end(), cells.begin(), cells.end());
  }
  res.table = normalize_scores(std::move(res.table), 1, &res.warnings);
  res.text = render_table(res.table, variants);
  return res;
}

inline void write_reports(const std::filesystem::path& dir, const CompareResult& r,
                          const std::vector<VariantSpec>& variants) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "report.csv");
  csv << "dataset,category,variant,raw,normalized\n";
  char buf[64];
  auto num = [&](double v) {
    if (!std::isfinite(v)) return std::string("NA");
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  for (const auto& e : r.table.entries)
    csv << csv::quote(e.dataset) << ',' << e.category << ',' << csv::quote(e.variant) << ',' << num(e.raw) << ','
        << num(e.normalized) << '\n';
  std::ofstream(dir / "report.txt") << r.text;
  std::ofstream agg(dir / "aggregate.csv");
  agg << "variant,category,mean_normalized\n";
  for (const auto& v : variants)
    for (const char* c : {"classification", "classification/mixed", "classification/numerical", "regression",
                          "regression/mixed", "regression/numerical"}) {
      const double a = r.table.aggregate(v.name, c);
      if (std::isfinite(a)) agg << csv::quote(v.name) << ',' << c << ',' << num(a) << '\n';
    }
}

}  // namespace pfnlab
