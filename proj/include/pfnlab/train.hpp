#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pfnlab/checkpoint.hpp"
#include "pfnlab/error.hpp"
#include "pfnlab/infer.hpp"
#include "pfnlab/metrics.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/optim.hpp"
#include "pfnlab/preprocess.hpp"
#include "pfnlab/prior.hpp"

namespace pfnlab {

enum class Regime { pretrain, finetune, scratch };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::pretrain: return "pretrain";
    case Regime::finetune: return "finetune";
    case Regime::scratch: return "scratch";
  }
  return "?";
}

inline const char* to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

struct TrainConfig {
  Regime regime = Regime::finetune;
  double learning_rate = 1e-5;
  double weight_decay = 0.0;
  std::size_t max_steps = 200;
  std::size_t eval_every = 50;
  std::size_t patience = 16;  // evaluations without improvement
  std::uint64_t seed = 0;
  double support_fraction = 0.8;
  double grad_clip = 1.0;  // global norm, 0 disables
  LrSchedule schedule = LrSchedule::constant;
  std::size_t warmup_steps = 0;
  std::size_t episode_rows = 0;           // fine-tune/scratch: rows per episode, 0 = whole train split
  std::size_t validation_episodes = 32;   // pretrain: held-out prior tasks
  std::size_t episodes_per_step = 1;      // pretrain: gradients averaged over this many episodes
  double validation_fraction = 0.1;       // share of the training split held out for early stopping

  static TrainConfig for_regime(Regime r) {
    TrainConfig c;
    c.regime = r;
    switch (r) {
      case Regime::finetune:
        c.learning_rate = 1e-5;
        c.weight_decay = 0.0;
        break;
      case Regime::scratch:
        c.learning_rate = 1e-4;
        c.weight_decay = 1e-5;
        break;
      case Regime::pretrain:
        c.learning_rate = 3e-4;
        c.weight_decay = 0.0;
        c.max_steps = 2000;
        c.eval_every = 100;
        c.warmup_steps = 100;
        c.schedule = LrSchedule::cosine;
        break;
    }
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail(ErrorCode::invalid_config, "learning_rate must be positive");
    if (weight_decay < 0) fail(ErrorCode::invalid_config, "weight_decay must be non-negative");
    if (eval_every == 0) fail(ErrorCode::invalid_config, "eval_every must be at least 1");
    if (patience == 0) fail(ErrorCode::invalid_config, "patience must be at least 1");
    if (!(support_fraction > 0 && support_fraction < 1)) fail(ErrorCode::invalid_config, "support_fraction must lie in (0, 1)");
    if (!(validation_fraction > 0 && validation_fraction < 1))
      fail(ErrorCode::invalid_config, "validation_fraction must lie in (0, 1)");
    if (grad_clip < 0) fail(ErrorCode::invalid_config, "grad_clip must be non-negative");
    if (episodes_per_step == 0) fail(ErrorCode::invalid_config, "episodes_per_step must be at least 1");
  }
};

template <class T>
struct TrainState {
  ModelParams<T> params;
  AdamState<T> optimizer;
  std::size_t step = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t steps_since_best = 0;  // counted in evaluations
  std::mt19937_64 rng;

  static TrainState start(ModelParams<T> params, const ModelConfig& cfg, std::uint64_t seed) {
    TrainState s;
    s.params = std::move(params);
    s.optimizer = AdamState<T>::zeros(cfg);
    s.rng.seed(seed);
    return s;
  }

  bool operator==(const TrainState& o) const {
    return params == o.params && optimizer.first_moment == o.optimizer.first_moment &&
           optimizer.second_moment == o.optimizer.second_moment && optimizer.step == o.optimizer.step &&
           step == o.step && steps_since_best == o.steps_since_best && rng == o.rng &&
           (best_metric == o.best_metric || (std::isnan(best_metric) && std::isnan(o.best_metric)));
  }
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) fail(ErrorCode::checkpoint_mismatch, "corrupt generator state in checkpoint");
  return rng;
}

template <class T>
void save_train_state(const std::filesystem::path& path, const ModelConfig& cfg, const TrainState<T>& s) {
  Checkpoint ck;
  ck.config = cfg;
  append_tensors(ck.tensors, s.params);
  append_tensors(ck.tensors, s.optimizer.first_moment, "adam.m.");
  append_tensors(ck.tensors, s.optimizer.second_moment, "adam.v.");
  nlohmann::json st;
  st["step"] = s.step;
  st["optimizer_step"] = s.optimizer.step;
  st["best_metric"] = std::isfinite(s.best_metric) ? nlohmann::json(s.best_metric) : nlohmann::json(nullptr);
  st["steps_since_best"] = s.steps_since_best;
  st["rng"] = rng_to_string(s.rng);
  ck.metadata["train_state"] = st;
  write_checkpoint(path, ck);
}

template <class T>
TrainState<T> load_train_state(const std::filesystem::path& path, const ModelConfig& cfg) {
  const Checkpoint ck = read_checkpoint(path);
  const std::string mismatch = first_config_mismatch(cfg, ck.config);
  if (!mismatch.empty()) fail(ErrorCode::checkpoint_mismatch, "checkpoint field '" + mismatch + "' differs");
  if (!ck.metadata.contains("train_state"))
    fail(ErrorCode::checkpoint_mismatch, path.string() + " holds parameters only, not a training state");
  TrainState<T> s;
  s.params = ModelParams<T>::zeros(cfg);
  s.optimizer = AdamState<T>::zeros(cfg);
  extract_tensors(ck, s.params);
  extract_tensors(ck, s.optimizer.first_moment, "adam.m.");
  extract_tensors(ck, s.optimizer.second_moment, "adam.v.");
  const auto& st = ck.metadata.at("train_state");
  s.step = st.at("step").get<std::size_t>();
  s.optimizer.step = st.at("optimizer_step").get<std::size_t>();
  s.best_metric = st.at("best_metric").is_null() ? -std::numeric_limits<double>::infinity()
                                                 : st.at("best_metric").get<double>();
  s.steps_since_best = st.at("steps_since_best").get<std::size_t>();
  s.rng = rng_from_string(st.at("rng").get<std::string>());
  return s;
}

/// One AdamW update at the scheduled learning rate.
template <class T>
void optimizer_step(TrainState<T>& s, const ModelParams<T>& grads, const TrainConfig& cfg) {
  const double lr = scheduled_lr(cfg.learning_rate, cfg.schedule, s.optimizer.step, cfg.max_steps, cfg.warmup_steps);
  adamw_update(s.params, s.optimizer, grads, lr, cfg.weight_decay);
}

/// backward on each episode, gradients averaged in episode order, then
/// clip and update. Returns the mean episode loss before the update.
template <class T>
double train_step(TrainState<T>& s, std::span<const Episode<T>> episodes, const ModelConfig& mcfg,
                  const TrainConfig& cfg) {
  if (episodes.empty()) fail(ErrorCode::invalid_config, "train_step needs at least one episode");
  double loss = 0;
  try {
    ModelParams<T> grads;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      LossAndGradient<T> lg = backward(episodes[i], s.params, mcfg);
      loss += static_cast<double>(lg.loss);
      if (i == 0) {
        grads = std::move(lg.grads);
      } else {
        auto dst = grads.tensors();
        const auto src = lg.grads.tensors();
        for (std::size_t t = 0; t < dst.size(); ++t)
          for (Eigen::Index k = 0; k < dst[t].size(); ++k) dst[t].data[k] += src[t].data[k];
      }
    }
    if (episodes.size() > 1) {
      const T scale = T(1) / static_cast<T>(episodes.size());
      grads.visit([&](const std::string&, auto& m) { m *= scale; });
    }
    if (cfg.grad_clip > 0) clip_global_norm(grads, cfg.grad_clip);
    optimizer_step(s, grads, cfg);
  } catch (const Error& err) {
    fail(err.code(), "step " + std::to_string(s.step + 1) + ": " + err.what());
  }
  s.step += 1;
  return loss / static_cast<double>(episodes.size());
}

template <class T>
double train_step(TrainState<T>& s, const Episode<T>& e, const ModelConfig& mcfg, const TrainConfig& cfg) {
  return train_step(s, std::span<const Episode<T>>(&e, 1), mcfg, cfg);
}

// ---------------------------------------------------------------------------

inline constexpr std::size_t kFinetuneSplitRetries = 32;

/// Random support/query partition of `rows` (all rows when empty). Rows of
/// a class with a single instance always go to the support. For
/// classification every class of the pool must reach the support.
inline SplitIndices draw_finetune_split(const PreparedSet& train, double fraction, std::mt19937_64& rng,
                                        std::size_t episode_rows = 0) {
  std::vector<std::size_t> pool(train.rows());
  std::iota(pool.begin(), pool.end(), 0);
  if (episode_rows > 0 && episode_rows < pool.size()) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(episode_rows);
    std::sort(pool.begin(), pool.end());
  }
  if (pool.size() < 2) fail(ErrorCode::irreducible_degeneracy, "fine-tuning needs at least 2 rows");
  const bool classify = train.task == TaskKind::classification;

  std::vector<std::size_t> counts(classify ? train.n_classes : 0, 0);
  if (classify)
    for (std::size_t r : pool) ++counts[static_cast<std::size_t>(train.targets[r])];
  std::vector<std::size_t> forced, free;
  for (std::size_t r : pool) {
    if (classify && counts[static_cast<std::size_t>(train.targets[r])] == 1)
      forced.push_back(r);
    else
      free.push_back(r);
  }
  const std::size_t n = pool.size();
  const std::size_t n_s = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), std::max<std::size_t>(1, forced.size()), n - 1);
  if (forced.size() >= n) fail(ErrorCode::irreducible_degeneracy, "every row is the only instance of its class");

  for (std::size_t attempt = 0; attempt < kFinetuneSplitRetries; ++attempt) {
    std::shuffle(free.begin(), free.end(), rng);
    SplitIndices s;
    s.train = forced;
    s.train.insert(s.train.end(), free.begin(), free.begin() + static_cast<std::ptrdiff_t>(n_s - forced.size()));
    s.test.assign(free.begin() + static_cast<std::ptrdiff_t>(n_s - forced.size()), free.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    if (!classify) return s;
    std::vector<bool> seen(train.n_classes, false);
    for (std::size_t r : s.train) seen[static_cast<std::size_t>(train.targets[r])] = true;
    bool ok = true;
    for (std::size_t c = 0; c < train.n_classes; ++c) ok = ok && (seen[c] || counts[c] == 0);
    if (ok) return s;
  }
  fail(ErrorCode::irreducible_degeneracy, "no support split covering every class after " +
                                              std::to_string(kFinetuneSplitRetries) + " attempts");
}

template <class T>
Episode<T> make_finetune_episode(const PreparedSet& train, double fraction, std::mt19937_64& rng,
                                 std::size_t episode_rows = 0) {
  const SplitIndices s = draw_finetune_split(train, fraction, rng, episode_rows);
  return make_episode<T>(train, s.train, train.features, s.test, &train.targets);
}

/// Accuracy, or R² in the transformed target space, of full-context
/// predictions for `val` with all of `train` as support.
template <class T>
double validation_metric(const ModelParams<T>& params, const ModelConfig& cfg, const PreparedSet& train,
                         const PreparedSet& val, const InferenceConfig& icfg = {}) {
  const Predictions p = predict_full_context(params, cfg, train, val.features, icfg);
  if (cfg.task == TaskKind::regression) return r2_score(p.values, val.targets).r2;
  std::vector<std::size_t> truth(val.targets.size());
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = static_cast<std::size_t>(val.targets[i]);
  return accuracy(p.labels(), truth).accuracy;
}

// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double smoothed_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> metric;
};

template <class T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<StepRecord> history;  // one record per optimizer step
  std::vector<std::pair<std::size_t, double>> evaluations;
  double best_metric = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_step = 0;
  bool stopped_early = false;
};

/// Run-directory writer: metrics log plus checkpoints.
class RunOutput {
 public:
  explicit RunOutput(std::filesystem::path dir, bool step_checkpoints = true)
      : dir_(std::move(dir)), step_checkpoints_(step_checkpoints) {
    std::filesystem::create_directories(dir_);
    log_.open(dir_ / "metrics.log", std::ios::trunc);
    if (!log_) fail(ErrorCode::io_error, "cannot write " + (dir_ / "metrics.log").string());
  }

  const std::filesystem::path& dir() const { return dir_; }

  /// step <TAB> loss <TAB> validation metric ("-" when not evaluated)
  void log(const StepRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t", r.step, r.loss);
    log_ << buf;
    if (r.metric) {
      std::snprintf(buf, sizeof(buf), "%.9g", *r.metric);
      log_ << buf << '\n';
    } else {
      log_ << "-\n";
    }
    log_.flush();
  }

  template <class T>
  void step_checkpoint(const ModelConfig& cfg, const TrainState<T>& s) {
    if (step_checkpoints_) save_train_state(dir_ / ("step-" + std::to_string(s.step) + ".ckpt"), cfg, s);
  }

  template <class T>
  void best_checkpoint(const ModelConfig& cfg, const ModelParams<T>& p, double metric, std::size_t step) {
    save_model(dir_ / "best.ckpt", cfg, p, {{"validation_metric", metric}, {"step", step}});
  }

 private:
  std::filesystem::path dir_;
  bool step_checkpoints_;
  std::ofstream log_;
};

namespace detail {

inline void smooth(StepRecord& r, const std::vector<StepRecord>& history) {
  constexpr double kAlpha = 0.05;
  r.smoothed_loss = history.empty() ? r.loss : (1 - kAlpha) * history.back().smoothed_loss + kAlpha * r.loss;
}

}  // namespace detail

/// Shared fine-tune / scratch loop: fresh support/query resplit of `train`
/// every step, evaluation on `val` at step 0 and every eval_every steps,
/// early stopping on the validation metric. Returns the best parameters.
template <class T>
TrainResult<T> fit_supervised(ModelParams<T> init, const PreparedSet& train, const PreparedSet& val,
                              const ModelConfig& mcfg, const TrainConfig& cfg, RunOutput* out = nullptr,
                              const InferenceConfig& eval_cfg = {}) {
  cfg.validate();
  mcfg.validate();
  if (train.task != mcfg.task) fail(ErrorCode::invalid_config, "training data task differs from the model task");
  TrainResult<T> res;
  res.params = init;
  if (cfg.max_steps == 0) return res;

  TrainState<T> s = TrainState<T>::start(std::move(init), mcfg, cfg.seed);
  auto evaluate = [&]() {
    const double m = validation_metric(s.params, mcfg, train, val, eval_cfg);
    res.evaluations.emplace_back(s.step, m);
    if (m > s.best_metric) {
      s.best_metric = m;
      s.steps_since_best = 0;
      res.params = s.params;
      res.best_metric = m;
      res.best_step = s.step;
      if (out) out->best_checkpoint(mcfg, s.params, m, s.step);
    } else {
      s.steps_since_best += 1;
    }
    return m;
  };
  evaluate();

  while (s.step < cfg.max_steps) {
    const Episode<T> e = make_finetune_episode<T>(train, cfg.support_fraction, s.rng, cfg.episode_rows);
    StepRecord r;
    r.loss = train_step(s, e, mcfg, cfg);
    r.step = s.step;
    detail::smooth(r, res.history);
    const bool eval_now = s.step % cfg.eval_every == 0 || s.step == cfg.max_steps;
    if (eval_now) r.metric = evaluate();
    res.history.push_back(r);
    if (out) {
      out->log(r);
      if (eval_now) out->step_checkpoint(mcfg, s);
    }
    if (eval_now && s.steps_since_best >= cfg.patience) {
      res.stopped_early = s.step < cfg.max_steps;
      break;
    }
  }
  return res;
}

template <class T>
TrainResult<T> finetune(const ModelParams<T>& init, const PreparedSet& train, const PreparedSet& val,
                        const ModelConfig& mcfg, const TrainConfig& cfg, RunOutput* out = nullptr,
                        const InferenceConfig& eval_cfg = {}) {
  if (cfg.regime != Regime::finetune) fail(ErrorCode::invalid_config, "finetune needs regime 'finetune'");
  return fit_supervised(init, train, val, mcfg, cfg, out, eval_cfg);
}

/// Fresh initialization drawn from a generator seeded with cfg.seed.
template <class T>
TrainResult<T> train_scratch(const PreparedSet& train, const PreparedSet& val, const ModelConfig& mcfg,
                             const TrainConfig& cfg, RunOutput* out = nullptr, const InferenceConfig& eval_cfg = {}) {
  if (cfg.regime != Regime::scratch) fail(ErrorCode::invalid_config, "train_scratch needs regime 'scratch'");
  mcfg.validate();
  std::mt19937_64 init_rng(cfg.seed ^ 0x5c7a7c4ull);
  return fit_supervised(ModelParams<T>::initialize(mcfg, init_rng), train, val, mcfg, cfg, out, eval_cfg);
}

/// Fixed held-out prior episodes used to score pretraining.
template <class T>
std::vector<Episode<T>> prior_validation_episodes(const PriorConfig& prior, std::size_t n,
                                                  const PreprocessConfig& pcfg = {}) {
  std::mt19937_64 rng(prior.seed);
  std::vector<Episode<T>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_prior_episode<T>(prior, rng, pcfg));
  return out;
}

template <class T>
double episode_accuracy(const std::vector<Episode<T>>& episodes, const ModelParams<T>& p, const ModelConfig& c) {
  if (episodes.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  for (const auto& e : episodes) {
    const Mat<T> probs = predict_proba(e, p, c);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      Eigen::Index best = 0;
      probs.row(i).maxCoeff(&best);
      correct += static_cast<double>(best) == static_cast<double>((*e.query_y)(i));
    }
    total += static_cast<double>(correct) / static_cast<double>(probs.rows());
  }
  return total / static_cast<double>(episodes.size());
}

/// Pretraining on freshly sampled prior episodes. The model is initialized
/// from, and episodes drawn with, the generator seeded by cfg.seed;
/// prior.seed selects the held-out validation tasks. Returns the final
/// parameters; the best ones by validation accuracy go to best.ckpt.
template <class T>
TrainResult<T> pretrain(const ModelConfig& mcfg, const PriorConfig& prior, const TrainConfig& cfg,
                        RunOutput* out = nullptr, const PreprocessConfig& pcfg_in = {}) {
  if (cfg.regime != Regime::pretrain) fail(ErrorCode::invalid_config, "pretrain needs regime 'pretrain'");
  if (mcfg.task != TaskKind::classification) fail(ErrorCode::invalid_config, "pretraining is classification only");
  cfg.validate();
  mcfg.validate();
  prior.validate_for(mcfg);
  PreprocessConfig pcfg = pcfg_in;
  pcfg.max_features = mcfg.max_features;

  std::mt19937_64 rng(cfg.seed);
  TrainState<T> s = TrainState<T>::start(ModelParams<T>::initialize(mcfg, rng), mcfg, cfg.seed);
  s.rng = rng;
  TrainResult<T> res;
  res.params = s.params;
  if (cfg.max_steps == 0) return res;

  const auto val = prior_validation_episodes<T>(prior, cfg.validation_episodes, pcfg);
  while (s.step < cfg.max_steps) {
    std::vector<Episode<T>> batch;
    for (std::size_t i = 0; i < cfg.episodes_per_step; ++i) batch.push_back(sample_prior_episode<T>(prior, s.rng, pcfg));
    StepRecord r;
    r.loss = train_step(s, std::span<const Episode<T>>(batch), mcfg, cfg);
    r.step = s.step;
    detail::smooth(r, res.history);
    const bool eval_now = s.step % cfg.eval_every == 0 || s.step == cfg.max_steps;
    if (eval_now && !val.empty()) {
      const double m = episode_accuracy(val, s.params, mcfg);
      r.metric = m;
      res.evaluations.emplace_back(s.step, m);
      if (m > s.best_metric) {
        s.best_metric = m;
        s.steps_since_best = 0;
        res.best_metric = m;
        res.best_step = s.step;
        if (out) out->best_checkpoint(mcfg, s.params, m, s.step);
      } else {
        s.steps_since_best += 1;
      }
    }
    res.history.push_back(r);
    if (out) {
      out->log(r);
      if (eval_now) out->step_checkpoint(mcfg, s);
    }
  }
  res.params = s.params;
  if (out && val.empty()) out->best_checkpoint(mcfg, s.params, std::numeric_limits<double>::quiet_NaN(), s.step);
  return res;
}

}  // namespace pfnlab
