#pragma once

// Desk-scale benchmark tasks. Each family has structure the pretraining
// prior does not produce directly (parity, rings, grids, axis-aligned
// rules), so there is room for fine-tuning to help.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pfnlab/dataio.hpp"

namespace pfnlab {

struct BenchTask {
  std::string id;
  Dataset data;

  std::string category() const {
    return std::string(to_string(data.task())) + (data.has_categorical_features() ? "/mixed" : "/numerical");
  }
};

struct SuiteConfig {
  std::size_t n_tasks = 10;
  std::size_t min_rows = 500;
  std::size_t max_rows = 2000;
  TaskKind task = TaskKind::classification;
  double label_noise = 0.05;    // classification: share of labels flipped at random
  double target_noise = 0.1;    // regression: noise sd relative to the signal sd
  std::uint64_t seed = 2024;
};

namespace detail {

enum class Family { linear, parity, rings, wave, rules, grid, blobs, interaction };
inline constexpr Family kFamilies[] = {Family::linear, Family::parity, Family::rings,  Family::wave,
                                       Family::rules,  Family::grid,   Family::blobs, Family::interaction};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::linear: return "linear";
    case Family::parity: return "parity";
    case Family::rings: return "rings";
    case Family::wave: return "wave";
    case Family::rules: return "rules";
    case Family::grid: return "grid";
    case Family::blobs: return "blobs";
    case Family::interaction: return "interaction";
  }
  return "?";
}

/// Latent score for one row; relevant inputs are the first few features.
struct ScoreFn {
  Family family;
  std::vector<double> w;
  std::vector<std::vector<double>> centres;
  std::vector<std::pair<std::size_t, double>> splits;
  double freq = 3.0;

  double operator()(const std::vector<double>& x) const {
    switch (family) {
      case Family::linear: {
        double s = 0;
        for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * x[j];
        return s;
      }
      case Family::parity: return (x[0] > 0) == (x[1] > 0) ? 1.0 : -1.0;
      case Family::rings: return std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
      case Family::wave: return x[1] - std::sin(freq * x[0]);
      case Family::rules: {
        // depth-3 tree over `splits`, leaf index as score
        const std::size_t a = x[splits[0].first] > splits[0].second;
        const std::size_t b = x[splits[1 + a].first] > splits[1 + a].second;
        const std::size_t c = x[splits[3 + 2 * a + b].first] > splits[3 + 2 * a + b].second;
        return static_cast<double>(4 * a + 2 * b + c) * 0.37 + w[4 * a + 2 * b + c];
      }
      case Family::grid: {
        const long gx = static_cast<long>(std::floor(x[0] * 1.2));
        const long gy = static_cast<long>(std::floor(x[1] * 1.2));
        return ((gx + gy) % 2 == 0) ? 1.0 : -1.0;
      }
      case Family::blobs: {
        std::size_t best = 0;
        double bd = INFINITY;
        for (std::size_t c = 0; c < centres.size(); ++c) {
          double d = 0;
          for (std::size_t j = 0; j < centres[c].size(); ++j) d += (x[j] - centres[c][j]) * (x[j] - centres[c][j]);
          if (d < bd) {
            bd = d;
            best = c;
          }
        }
        return w[best];
      }
      case Family::interaction: return x[0] * x[1] + 0.5 * x[2] * x[3];
    }
    return 0;
  }
};

inline ScoreFn make_score_fn(Family f, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  ScoreFn s{f, {}, {}, {}, 3.0};
  if (f == Family::linear) {
    s.w.resize(std::min<std::size_t>(d, 5));
    for (double& v : s.w) v = g(rng);
  } else if (f == Family::rules) {
    std::uniform_int_distribution<std::size_t> feat(0, std::min<std::size_t>(d, 4) - 1);
    for (int i = 0; i < 7; ++i) s.splits.emplace_back(feat(rng), 0.6 * g(rng));
    s.w.resize(8);
    for (double& v : s.w) v = 2.0 * g(rng);
  } else if (f == Family::blobs) {
    const std::size_t k = 8;
    s.centres.assign(k, std::vector<double>(std::min<std::size_t>(d, 3)));
    for (auto& c : s.centres)
      for (double& v : c) v = 1.2 * g(rng);
    s.w.resize(k);
    for (std::size_t c = 0; c < k; ++c) s.w[c] = static_cast<double>(c % 3) + 0.1 * g(rng);
  } else if (f == Family::wave) {
    s.freq = std::uniform_real_distribution<double>(2.0, 4.0)(rng);
  }
  return s;
}

inline std::size_t min_features(Family f) {
  switch (f) {
    case Family::rings: return 3;
    case Family::interaction: return 4;
    case Family::rules: return 4;
    default: return 2;
  }
}

}  // namespace detail

/// Tasks cycle through the families. Odd-numbered tasks carry a categorical
/// column whose levels shift the score, which makes them "mixed".
inline std::vector<BenchTask> make_synthetic_suite(const SuiteConfig& cfg) {
  std::vector<BenchTask> out;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n_families = std::size(detail::kFamilies);
  for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
    const detail::Family fam = detail::kFamilies[t % n_families];
    const std::size_t n = cfg.n_tasks > 1 ? cfg.min_rows + (cfg.max_rows - cfg.min_rows) * ((t * 7) % cfg.n_tasks) / (cfg.n_tasks - 1)
                                          : cfg.min_rows;
    const std::size_t d = std::max(detail::min_features(fam), std::uniform_int_distribution<std::size_t>(3, 10)(rng));
    const bool mixed = t % 2 == 1;
    const std::size_t k = cfg.task == TaskKind::classification ? 2 + t % 3 : 0;
    const detail::ScoreFn score = detail::make_score_fn(fam, d, rng);

    std::vector<double> level_shift(5);
    for (double& v : level_shift) v = g(rng);
    std::vector<std::vector<double>> xs(n, std::vector<double>(d));
    std::vector<std::size_t> levels(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (double& v : xs[i]) v = g(rng);
      double s = score(xs[i]);
      if (mixed) {
        levels[i] = std::uniform_int_distribution<std::size_t>(0, level_shift.size() - 1)(rng);
        s += 0.8 * level_shift[levels[i]];
      }
      scores[i] = s;
    }

    std::vector<std::string> targets(n);
    if (cfg.task == TaskKind::classification) {
      // equal-mass bins of the score
      std::vector<double> sorted = scores;
      std::sort(sorted.begin(), sorted.end());
      std::vector<double> cuts;
      for (std::size_t c = 1; c < k; ++c) cuts.push_back(sorted[c * n / k]);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t label = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), scores[i]) - cuts.begin());
        if (u(rng) < cfg.label_noise) label = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
        targets[i] = "class_" + std::to_string(label);
      }
    } else {
      double mean = 0, var = 0;
      for (double s : scores) mean += s;
      mean /= static_cast<double>(n);
      for (double s : scores) var += (s - mean) * (s - mean);
      const double sd = std::sqrt(var / static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i) targets[i] = format_real(scores[i] + cfg.target_noise * sd * g(rng));
    }

    std::vector<ColumnSchema> schema;
    for (std::size_t j = 0; j < d; ++j) schema.push_back({"x" + std::to_string(j), ColumnKind::numeric, false});
    if (mixed) schema.push_back({"group", ColumnKind::categorical, false});
    schema.push_back({"target", cfg.task == TaskKind::classification ? ColumnKind::categorical : ColumnKind::numeric, true});
    std::vector<std::string> cells;
    cells.reserve(n * schema.size());
    static const char* kLevelNames[] = {"red", "green", "blue", "amber", "violet"};
    for (std::size_t i = 0; i < n; ++i) {
      for (double v : xs[i]) cells.push_back(format_real(v));
      if (mixed) cells.push_back(kLevelNames[levels[i]]);
      cells.push_back(targets[i]);
    }
    BenchTask task;
    task.id = std::string(cfg.task == TaskKind::classification ? "cls" : "reg") + "-" + std::to_string(t) + "-" +
              detail::family_name(fam);
    task.data = Dataset(std::move(schema), cfg.task, std::move(cells));
    out.push_back(std::move(task));
  }
  return out;
}

}  // namespace pfnlab
