#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "pfnlab/train.hpp"

using namespace pfnlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  return fs::temp_directory_path() / ("pfnlab_train_" + tag + "_" + std::to_string(std::random_device{}()));
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<double> losses(const std::vector<StepRecord>& h) {
  std::vector<double> out;
  for (const auto& r : h) out.push_back(r.loss);
  return out;
}

ModelConfig small_prior_model() {
  ModelConfig c;
  c.hidden_dim = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.feedforward_dim = 64;
  c.max_features = 10;
  return c;
}

PriorConfig small_prior() {
  PriorConfig p;
  p.min_rows = 60;
  p.max_rows = 120;
  p.feature_count_range = {2, 8};
  p.class_count_range = {2, 4};
  p.seed = 99;
  return p;
}

}  // namespace

TEST(TrainConfig, RegimeDefaults) {
  const auto ft = TrainConfig::for_regime(Regime::finetune);
  EXPECT_EQ(ft.learning_rate, 1e-5);
  EXPECT_EQ(ft.weight_decay, 0.0);
  const auto sc = TrainConfig::for_regime(Regime::scratch);
  EXPECT_EQ(sc.learning_rate, 1e-4);
  EXPECT_EQ(sc.weight_decay, 1e-5);
  const TrainConfig plain;
  EXPECT_EQ(plain.learning_rate, 1e-5);
  EXPECT_EQ(plain.support_fraction, 0.8);
  EXPECT_EQ(plain.eval_every, 50u);
  EXPECT_EQ(plain.patience, 16u);
  EXPECT_EQ(plain.schedule, LrSchedule::constant);
}

TEST(OptimizerStep, ConstantGradientFirstStep) {
  const auto c = fixtures::tiny_model();
  auto s = TrainState<double>::start(ModelParams<double>::zeros(c), c, 0);
  auto g = ModelParams<double>::zeros(c);
  g.label_proj.setOnes();
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  optimizer_step(s, g, cfg);
  EXPECT_NEAR(s.params.label_proj(3), -0.1, 1e-8);
  EXPECT_EQ(s.optimizer.step, 1u);
}

TEST(FinetuneEpisode, CountsAndDisjointness) {
  const auto prep = fixtures::prepare(fixtures::separable(13, 3, 1), 8, 10.0 / 13.0);
  ASSERT_EQ(prep.train.rows(), 10u);
  std::mt19937_64 rng(2);
  const auto s = draw_finetune_split(prep.train, 0.8, rng);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.test.size(), 2u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto r : s.test) EXPECT_TRUE(all.insert(r).second);
  EXPECT_EQ(all.size(), 10u);
  const auto e = make_finetune_episode<double>(prep.train, 0.8, rng);
  EXPECT_EQ(e.n_support(), 8u);
  ASSERT_TRUE(e.query_y);
  EXPECT_EQ(e.query_y->size(), 2);
}

TEST(FinetuneEpisode, ResplitsAreFresh) {
  const auto prep = fixtures::prepare(fixtures::separable(300, 4, 3), 8);
  std::mt19937_64 rng(4);
  std::set<std::vector<std::size_t>> seen;
  for (int i = 0; i < 100; ++i) seen.insert(draw_finetune_split(prep.train, 0.8, rng).train);
  EXPECT_GE(seen.size(), 99u);
}

TEST(FinetuneEpisode, SingletonClassAlwaysInSupport) {
  std::vector<std::vector<double>> x;
  std::vector<std::string> y;
  for (int i = 0; i < 20; ++i) {
    x.push_back({static_cast<double>(i)});
    y.push_back(i == 7 ? "rare" : (i % 2 ? "a" : "b"));
  }
  const Dataset d = make_numeric_dataset(x, y, TaskKind::classification);
  PreprocessConfig pc;
  pc.max_features = 4;
  const auto set = Preprocessor::fit(d, pc).prepare(d);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto s = draw_finetune_split(set, 0.8, rng);
    EXPECT_TRUE(std::binary_search(s.train.begin(), s.train.end(), 7u));
  }
}

TEST(FinetuneEpisode, IrreducibleDegeneracy) {
  const Dataset d = make_numeric_dataset({{1.0}, {2.0}}, {"a", "b"}, TaskKind::classification);
  PreprocessConfig pc;
  pc.max_features = 4;
  const auto set = Preprocessor::fit(d, pc).prepare(d);
  std::mt19937_64 rng(6);
  try {
    draw_finetune_split(set, 0.8, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::irreducible_degeneracy);
  }
}

TEST(Finetune, MaxStepsZeroReturnsInit) {
  const auto c = fixtures::tiny_model();
  const auto prep = fixtures::prepare(fixtures::separable(60, 3, 7), c.max_features);
  std::mt19937_64 rng(1);
  const auto init = ModelParams<double>::initialize(c, rng);
  auto cfg = TrainConfig::for_regime(Regime::finetune);
  cfg.max_steps = 0;
  const auto r = finetune(init, prep.train, prep.test, c, cfg);
  EXPECT_TRUE(r.params == init);
  EXPECT_TRUE(r.history.empty());
}

TEST(Finetune, PatienceOneWithoutImprovementReturnsFirstEvaluation) {
  const auto c = fixtures::tiny_model();
  const auto prep = fixtures::prepare(fixtures::separable(60, 3, 8), c.max_features);
  std::mt19937_64 rng(2);
  const auto init = ModelParams<double>::initialize(c, rng);
  auto cfg = TrainConfig::for_regime(Regime::finetune);
  cfg.learning_rate = 1e-300;  // updates too small to move any prediction
  cfg.max_steps = 50;
  cfg.eval_every = 5;
  cfg.patience = 1;
  const auto r = finetune(init, prep.train, prep.test, c, cfg);
  EXPECT_TRUE(r.params == init);
  EXPECT_EQ(r.best_step, 0u);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.history.size(), 5u);
}

TEST(Finetune, ReturnsBestRecordedParams) {
  const auto c = fixtures::tiny_model();
  const auto prep = fixtures::prepare(fixtures::separable(120, 3, 9), c.max_features);
  std::mt19937_64 rng(3);
  const auto init = ModelParams<double>::initialize(c, rng);
  auto cfg = TrainConfig::for_regime(Regime::scratch);
  cfg.learning_rate = 3e-3;
  cfg.max_steps = 60;
  cfg.eval_every = 5;
  cfg.patience = 100;
  const auto r = fit_supervised(init, prep.train, prep.test, c, cfg);
  double best = -1;
  for (const auto& [step, m] : r.evaluations) best = std::max(best, m);
  EXPECT_EQ(r.best_metric, best);
  EXPECT_EQ(validation_metric(r.params, c, prep.train, prep.test), best);
  EXPECT_GT(best, r.evaluations.front().second);
}

TEST(Finetune, ReproducibleAndLogged) {
  const auto c = fixtures::tiny_model();
  const auto prep = fixtures::prepare(fixtures::separable(80, 3, 10), c.max_features);
  auto cfg = TrainConfig::for_regime(Regime::scratch);
  cfg.max_steps = 12;
  cfg.eval_every = 4;
  const auto d1 = temp_dir("a"), d2 = temp_dir("b");
  TrainResult<float> r1, r2;
  {
    RunOutput o1(d1), o2(d2);
    r1 = train_scratch<float>(prep.train, prep.test, c, cfg, &o1);
    r2 = train_scratch<float>(prep.train, prep.test, c, cfg, &o2);
  }
  EXPECT_EQ(losses(r1.history), losses(r2.history));
  EXPECT_TRUE(r1.params == r2.params);
  const std::string log = read_all(d1 / "metrics.log");
  EXPECT_EQ(log, read_all(d2 / "metrics.log"));
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 12);
  EXPECT_TRUE(fs::exists(d1 / "best.ckpt"));
  EXPECT_TRUE(fs::exists(d1 / "step-4.ckpt"));
  EXPECT_TRUE(fs::exists(d1 / "step-12.ckpt"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(TrainState, CheckpointRoundTripResumesBitIdentically) {
  const auto c = fixtures::tiny_model();
  const auto prep = fixtures::prepare(fixtures::separable(80, 3, 11), c.max_features);
  std::mt19937_64 init_rng(4);
  auto cfg = TrainConfig::for_regime(Regime::scratch);
  auto s = TrainState<float>::start(ModelParams<float>::initialize(c, init_rng), c, 17);
  for (int i = 0; i < 3; ++i) train_step(s, make_finetune_episode<float>(prep.train, 0.8, s.rng), c, cfg);
  s.best_metric = 0.625;
  s.steps_since_best = 2;

  const auto path = fs::temp_directory_path() / ("pfnlab_state_" + std::to_string(std::random_device{}()) + ".ckpt");
  save_train_state(path, c, s);
  auto restored = load_train_state<float>(path, c);
  fs::remove(path);
  ASSERT_TRUE(restored == s);

  const double a = train_step(s, make_finetune_episode<float>(prep.train, 0.8, s.rng), c, cfg);
  const double b = train_step(restored, make_finetune_episode<float>(prep.train, 0.8, restored.rng), c, cfg);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(restored == s);
}

TEST(Scratch, RegressionRunsAndFitsLinearTask) {
  const auto c = fixtures::tiny_model(TaskKind::regression);
  const auto prep = fixtures::prepare(fixtures::linear_regression(200, 3, 12), c.max_features);
  auto cfg = TrainConfig::for_regime(Regime::scratch);
  cfg.learning_rate = 3e-3;
  cfg.max_steps = 150;
  cfg.eval_every = 10;
  const auto r = train_scratch<double>(prep.train, prep.test, c, cfg);
  EXPECT_GT(r.best_metric, 0.0);
}

TEST(Pretrain, MaxStepsZeroReturnsInitialization) {
  const auto c = small_prior_model();
  auto cfg = TrainConfig::for_regime(Regime::pretrain);
  cfg.max_steps = 0;
  cfg.seed = 3;
  const auto r = pretrain<float>(c, small_prior(), cfg);
  std::mt19937_64 rng(3);
  EXPECT_TRUE(r.params == ModelParams<float>::initialize(c, rng));
}

TEST(Pretrain, DeterministicHistory) {
  const auto c = small_prior_model();
  auto cfg = TrainConfig::for_regime(Regime::pretrain);
  cfg.max_steps = 15;
  cfg.eval_every = 5;
  cfg.validation_episodes = 4;
  const auto a = pretrain<float>(c, small_prior(), cfg);
  const auto b = pretrain<float>(c, small_prior(), cfg);
  EXPECT_EQ(losses(a.history), losses(b.history));
  EXPECT_EQ(a.evaluations, b.evaluations);
  EXPECT_TRUE(a.params == b.params);
}

TEST(Pretrain, LossTrendsDown) {
  const auto c = small_prior_model();
  auto cfg = TrainConfig::for_regime(Regime::pretrain);
  cfg.max_steps = 600;
  cfg.eval_every = 600;
  cfg.validation_episodes = 0;
  cfg.learning_rate = 1e-3;
  const auto r = pretrain<float>(c, small_prior(), cfg);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    first += r.history[i].loss;
    last += r.history[r.history.size() - 1 - i].loss;
  }
  EXPECT_LT(last, first);
}

TEST(Pretrain, RejectsRegressionAndOversizedPrior) {
  auto c = small_prior_model();
  auto cfg = TrainConfig::for_regime(Regime::pretrain);
  auto prior = small_prior();
  prior.feature_count_range = {2, 11};
  EXPECT_THROW(pretrain<float>(c, prior, cfg), Error);
  c.task = TaskKind::regression;
  EXPECT_THROW(pretrain<float>(c, small_prior(), cfg), Error);
}
