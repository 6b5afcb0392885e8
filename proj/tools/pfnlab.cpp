// pfnlab command-line driver.
//
// Exit status: 0 success, 1 configuration or validation error, 2 runtime
// failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <list>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfnlab/config.hpp"
#include "pfnlab/metrics.hpp"

using namespace pfnlab;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::io_error:
    case ErrorCode::non_finite_activation:
    case ErrorCode::non_finite_gradient:
    case ErrorCode::non_finite_update:
    case ErrorCode::irreducible_degeneracy:
      return kExitRuntime;
    default:
      return kExitConfig;
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

/// Options shared by every subcommand plus the hyperparameter flags it
/// advertises. Any other `--section.key=value` argument is also accepted as
/// an override.
struct Invocation {
  std::string command;
  Regime regime = Regime::finetune;
  std::string config_path;
  std::string run_dir;
  std::string checkpoint;
  std::string out;
  std::size_t n = 5;
  std::list<std::pair<std::string, std::string>> flags;  // key, value; stable addresses for CLI11
  std::vector<std::pair<std::string, CLI::Option*>> flag_options;
  CLI::App* app = nullptr;

  void flag(const std::string& key, const std::string& default_text, const std::string& help) {
    auto& slot = flags.emplace_back(key, "");
    flag_options.emplace_back(key, app->add_option("--" + key, slot.second, help)->default_str(default_text));
  }
};

Invocation& add_command(CLI::App& root, std::list<Invocation>& all, const std::string& name, const std::string& help,
                        Regime regime) {
  Invocation& inv = all.emplace_back();
  inv.command = name;
  inv.regime = regime;
  inv.app = root.add_subcommand(name, help);
  inv.app->allow_extras();
  inv.app->add_option("config", inv.config_path, "experiment config (JSON)")->required();
  inv.app->add_option("--run-dir", inv.run_dir, "run directory (default: timestamped under runs_root)");
  inv.flag("seed", "0", "global seed; PFNLAB_SEED overrides the file, this flag overrides both");
  return inv;
}

void training_flags(Invocation& inv, const TrainConfig& t) {
  inv.flag("train.learning_rate", num(t.learning_rate), "learning rate");
  inv.flag("train.weight_decay", num(t.weight_decay), "decoupled weight decay");
  inv.flag("train.max_steps", std::to_string(t.max_steps), "optimizer steps");
  inv.flag("train.eval_every", std::to_string(t.eval_every), "steps between validation passes");
  if (t.regime != Regime::pretrain) {
    inv.flag("train.patience", std::to_string(t.patience), "evaluations without improvement before stopping");
    inv.flag("train.support_fraction", num(t.support_fraction), "support share of each resplit");
  } else {
    inv.flag("train.episodes_per_step", std::to_string(t.episodes_per_step), "prior episodes per optimizer step");
  }
}

void inference_flags(Invocation& inv) {
  const InferenceConfig d;
  inv.flag("inference.mode", to_string(d.mode), "full_context or ensemble");
  inv.flag("inference.support_budget", std::to_string(d.support_budget), "largest support set in one pass");
  inv.flag("inference.subset_size", std::to_string(d.subset_size), "rows per ensemble subset");
  inv.flag("inference.n_ensembles", std::to_string(d.n_ensembles), "ensemble members");
}

/// Parses `--a.b=v` / `--a.b v` leftovers into overrides.
std::vector<std::pair<std::string, std::string>> extra_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos)
      fail(ErrorCode::invalid_config, "unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) fail(ErrorCode::invalid_config, "override '" + a + "' has no value");
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

ExperimentConfig resolve(const Invocation& inv) {
  json j = load_config_json(inv.config_path);
  if (const char* env = std::getenv("PFNLAB_SEED")) apply_override(j, "seed", env);
  for (const auto& [key, opt] : inv.flag_options)
    if (opt->count() > 0) apply_override(j, key, opt->as<std::string>());
  for (const auto& [key, value] : extra_overrides(inv.app->remaining())) apply_override(j, key, value);
  return resolve_config(j, inv.regime);
}

fs::path run_dir_for(const Invocation& inv, const ExperimentConfig& c) {
  const fs::path dir = make_run_dir(c.runs_root, inv.command,
                                    inv.run_dir.empty() ? std::nullopt : std::optional<fs::path>(inv.run_dir));
  write_frozen_config(dir, c);
  return dir;
}

const DatasetSection& need_dataset(const ExperimentConfig& c) {
  if (!c.dataset) fail(ErrorCode::invalid_config, "this command needs a 'dataset' section");
  return *c.dataset;
}

PreparedTask prepare_dataset(const ExperimentConfig& c) {
  const DatasetSection& ds = need_dataset(c);
  const Dataset d = load_configured_dataset(ds, c.model.max_features);
  return prepare_task(d, c.preprocess, ds.train_fraction, c.train.validation_fraction, ds.split_seed);
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

json test_report(const PreparedTask& t, const Predictions& p) {
  const double v = score_predictions(t, p);
  return {{"metric", p.task == TaskKind::classification ? "accuracy" : "r2"}, {"value", v}, {"n_test", p.rows()}};
}

int cmd_pretrain(const Invocation& inv) {
  const ExperimentConfig c = resolve(inv);
  if (c.model.task != TaskKind::classification) fail(ErrorCode::invalid_config, "pretraining is classification only");
  c.prior.validate_for(c.model);
  const fs::path dir = run_dir_for(inv, c);
  RunOutput out(dir);
  const auto res = pretrain<float>(c.model, c.prior, c.train, &out, c.preprocess);
  save_model(dir / "final.ckpt", c.model, res.params, {{"step", c.train.max_steps}});
  std::cout << "run directory: " << dir.string() << "\n";
  if (!res.evaluations.empty())
    std::cout << "best validation accuracy " << num(res.best_metric) << " at step " << res.best_step << "\n";
  return 0;
}

int cmd_supervised(const Invocation& inv) {
  const ExperimentConfig c = resolve(inv);
  const bool is_finetune = inv.regime == Regime::finetune;
  if (is_finetune && inv.checkpoint.empty())
    fail(ErrorCode::invalid_config, "finetune needs --checkpoint; use 'scratch' to train without one");
  const PreparedTask t = prepare_dataset(c);
  ModelParams<float> init;
  if (is_finetune) init = load_model<float>(inv.checkpoint, c.model, /*allow_task_change=*/true);
  const fs::path dir = run_dir_for(inv, c);
  RunOutput out(dir);
  const auto res = is_finetune ? finetune(init, t.train_fit, t.validation, c.model, c.train, &out)
                               : train_scratch<float>(t.train_fit, t.validation, c.model, c.train, &out);
  const json report = test_report(t, predict(res.params, c.model, t.train_all, t.test_features, c.inference));
  write_json(dir / "test_metrics.json", report);
  std::cout << "run directory: " << dir.string() << "\n"
            << "best validation " << num(res.best_metric) << " at step " << res.best_step << "\n"
            << "test " << report["metric"].get<std::string>() << " " << num(report["value"].get<double>()) << "\n";
  return 0;
}

int cmd_predict(const Invocation& inv, bool write_predictions) {
  const ExperimentConfig c = resolve(inv);
  if (inv.checkpoint.empty()) fail(ErrorCode::invalid_config, "--checkpoint is required");
  const PreparedTask t = prepare_dataset(c);
  const auto params = load_model<float>(inv.checkpoint, c.model);
  const fs::path dir = run_dir_for(inv, c);
  const Predictions p = predict(params, c.model, t.train_all, t.test_features, c.inference);
  const json report = test_report(t, p);
  write_json(dir / "test_metrics.json", report);
  if (write_predictions) {
    const fs::path out = inv.out.empty() ? dir / "predictions.csv" : fs::path(inv.out);
    std::ofstream f(out);
    if (!f) fail(ErrorCode::io_error, "cannot write " + out.string());
    if (p.task == TaskKind::classification) {
      f << "pred";
      for (Eigen::Index k = 0; k < p.probabilities.cols(); ++k) f << ",p_" << k;
      f << '\n';
      const auto labels = p.labels();
      for (std::size_t i = 0; i < labels.size(); ++i) {
        f << csv::quote(t.pre.labels().decode(labels[i]));
        for (Eigen::Index k = 0; k < p.probabilities.cols(); ++k)
          f << ',' << format_real(p.probabilities(static_cast<Eigen::Index>(i), k));
        f << '\n';
      }
    } else {
      f << "pred\n";
      for (double v : p.values) f << format_real(t.pre.decode_target(v)) << '\n';
    }
    std::cout << "predictions: " << out.string() << "\n";
  }
  std::cout << report["metric"].get<std::string>() << " " << num(report["value"].get<double>()) << " on "
            << report["n_test"].get<std::size_t>() << " held-out rows\n";
  return 0;
}

int cmd_compare(const Invocation& inv) {
  const ExperimentConfig c = resolve(inv);
  const BenchSection& b = c.bench;
  if (b.variants.size() < 2)
    fail(ErrorCode::insufficient_variants, "compare needs at least 2 variants, got " + std::to_string(b.variants.size()));
  std::vector<VariantSpec> variants;
  for (const auto& name : b.variants) variants.push_back(find_variant(name, b.subset_fraction, b.n_ensembles));

  std::vector<BenchTask> tasks;
  for (TaskKind kind : {TaskKind::classification, TaskKind::regression}) {
    SuiteConfig s;
    s.task = kind;
    s.n_tasks = kind == TaskKind::classification ? b.classification_tasks : b.regression_tasks;
    s.min_rows = b.min_rows;
    s.max_rows = b.max_rows;
    s.seed = kind == TaskKind::classification ? b.suite_seed : b.suite_seed + 1;
    for (auto& t : make_synthetic_suite(s)) tasks.push_back(std::move(t));
  }
  if (c.dataset) tasks.push_back({fs::path(c.dataset->path).stem().string(), load_configured_dataset(*c.dataset, c.model.max_features)});

  std::optional<ModelParams<float>> pretrained;
  ModelConfig pretrained_cfg = c.model;
  pretrained_cfg.task = TaskKind::classification;
  if (!inv.checkpoint.empty()) pretrained = load_model<float>(inv.checkpoint, pretrained_cfg);

  BenchSetup setup;
  setup.model = c.model;
  setup.pretrained = pretrained ? &*pretrained : nullptr;
  setup.finetune = b.finetune;
  setup.scratch = b.scratch;
  setup.preprocess = c.preprocess;
  if (c.dataset) setup.train_fraction = c.dataset->train_fraction;
  setup.seeds = b.seeds;
  setup.progress = [](const std::string& m) { std::cerr << m << std::endl; };

  const fs::path dir = run_dir_for(inv, c);
  const CompareResult r = compare_variants(tasks, variants, setup);
  write_reports(dir, r, variants);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << r.text << "reports: " << dir.string() << "\n";
  return 0;
}

int cmd_dump_prior(const Invocation& inv) {
  const ExperimentConfig c = resolve(inv);
  if (inv.out.empty()) fail(ErrorCode::invalid_config, "--out is required");
  const fs::path dir = make_run_dir(c.runs_root, inv.command, fs::path(inv.out));
  write_frozen_config(dir, c);
  std::mt19937_64 rng(c.prior.seed);
  for (std::size_t i = 0; i < inv.n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "prior-%03zu.csv", i);
    write_dataset_csv(dir / name, sample_prior_dataset(c.prior, rng));
  }
  std::cout << "wrote " << inv.n << " datasets to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfnlab: pretrain, fine-tune and benchmark an in-context tabular classifier"};
  app.require_subcommand(1);
  std::list<Invocation> commands;

  auto& pre = add_command(app, commands, "pretrain", "pretrain on synthetic prior episodes", Regime::pretrain);
  training_flags(pre, TrainConfig::for_regime(Regime::pretrain));
  pre.flag("prior.max_rows", std::to_string(PriorConfig{}.max_rows), "largest sampled prior dataset");

  auto& ft = add_command(app, commands, "finetune", "fine-tune a checkpoint with per-step resplits", Regime::finetune);
  ft.app->add_option("--checkpoint", ft.checkpoint, "pretrained checkpoint (required)");
  training_flags(ft, TrainConfig::for_regime(Regime::finetune));

  auto& sc = add_command(app, commands, "scratch", "train a freshly initialized model on the dataset", Regime::scratch);
  training_flags(sc, TrainConfig::for_regime(Regime::scratch));

  auto& pr = add_command(app, commands, "predict", "predict the held-out split and write a CSV", Regime::finetune);
  pr.app->add_option("--checkpoint", pr.checkpoint, "model checkpoint (required)");
  pr.app->add_option("--out", pr.out, "predictions CSV (default: <run dir>/predictions.csv)");
  inference_flags(pr);

  auto& ev = add_command(app, commands, "evaluate", "score a checkpoint on the held-out split", Regime::finetune);
  ev.app->add_option("--checkpoint", ev.checkpoint, "model checkpoint (required)");
  inference_flags(ev);

  auto& cmp = add_command(app, commands, "compare", "run the variant comparison table", Regime::finetune);
  cmp.app->add_option("--checkpoint", cmp.checkpoint, "pretrained checkpoint for ICL and fine-tune variants");
  const BenchSection bench;
  cmp.flag("bench.subset_fraction", num(bench.subset_fraction), "ensemble subset share for 1k variants");
  cmp.flag("bench.n_ensembles", std::to_string(bench.n_ensembles), "ensemble members for 1k variants");
  cmp.flag("bench.finetune.learning_rate", num(bench.finetune.learning_rate), "fine-tune learning rate");
  cmp.flag("bench.finetune.weight_decay", num(bench.finetune.weight_decay), "fine-tune weight decay");
  cmp.flag("bench.scratch.learning_rate", num(bench.scratch.learning_rate), "scratch learning rate");
  cmp.flag("bench.scratch.weight_decay", num(bench.scratch.weight_decay), "scratch weight decay");

  auto& dump = add_command(app, commands, "dump-prior", "write sampled prior datasets as CSV", Regime::pretrain);
  dump.app->add_option("--n", dump.n, "number of datasets")->capture_default_str();
  dump.app->add_option("--out", dump.out, "output directory (required)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  for (auto& inv : commands) {
    if (!inv.app->parsed()) continue;
    try {
      if (inv.command == "pretrain") return cmd_pretrain(inv);
      if (inv.command == "finetune" || inv.command == "scratch") return cmd_supervised(inv);
      if (inv.command == "predict") return cmd_predict(inv, true);
      if (inv.command == "evaluate") return cmd_predict(inv, false);
      if (inv.command == "compare") return cmd_compare(inv);
      if (inv.command == "dump-prior") return cmd_dump_prior(inv);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return kExitConfig;
}
