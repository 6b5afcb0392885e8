#pragma once

// Experiment configuration: one JSON file with sections, dotted command-line
// overrides and strict key checking.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnlab/bench.hpp"
#include "pfnlab/checkpoint.hpp"
#include "pfnlab/dataio.hpp"
#include "pfnlab/error.hpp"
#include "pfnlab/infer.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/preprocess.hpp"
#include "pfnlab/prior.hpp"
#include "pfnlab/suite.hpp"
#include "pfnlab/train.hpp"

namespace pfnlab {

using json = nlohmann::json;

struct DatasetSection {
  std::string path;
  TaskKind task = TaskKind::classification;
  std::vector<ColumnSchema> schema;  // empty: read names from the header
  std::string target;                // used when schema is empty
  std::vector<std::string> categorical;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;

  /// Schema for a CSV whose header row is `header`.
  std::vector<ColumnSchema> resolve_schema(const std::vector<std::string>& header) const {
    if (!schema.empty()) return schema;
    if (target.empty()) fail(ErrorCode::invalid_config, "dataset needs either 'schema' or 'target'");
    std::vector<ColumnSchema> out;
    bool found = false;
    for (const auto& name : header) {
      const bool is_target = name == target;
      found = found || is_target;
      const bool cat = std::find(categorical.begin(), categorical.end(), name) != categorical.end() ||
                       (is_target && task == TaskKind::classification);
      out.push_back({name, cat ? ColumnKind::categorical : ColumnKind::numeric, is_target});
    }
    if (!found) fail(ErrorCode::schema_mismatch, "target column '" + target + "' is not in the header");
    return out;
  }
};

struct BenchSection {
  std::vector<std::string> variants = {"Scratch-10k", "ICL-1k", "ICL-10k", "Fine-tune-1k", "Fine-tune-10k"};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  double subset_fraction = 0.1;
  std::size_t n_ensembles = 10;
  std::size_t classification_tasks = 10;
  std::size_t regression_tasks = 4;
  std::size_t min_rows = 500;
  std::size_t max_rows = 2000;
  std::uint64_t suite_seed = 2024;
  TrainConfig finetune = TrainConfig::for_regime(Regime::finetune);
  TrainConfig scratch = TrainConfig::for_regime(Regime::scratch);
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string runs_root = "runs";
  std::optional<DatasetSection> dataset;
  ModelConfig model;
  PriorConfig prior;
  TrainConfig train;
  InferenceConfig inference;
  PreprocessConfig preprocess;
  BenchSection bench;
};

namespace detail {

/// Reads keys of one JSON object and rejects any key it was not asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::invalid_config, "'" + path_ + "' must be an object");
  }

  template <class T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::invalid_config, "bad value for '" + name(key) + "': " + e.what());
    }
    return true;
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) fail(ErrorCode::invalid_config, "unknown config key '" + name(key) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& s, const std::string& key, std::initializer_list<std::pair<const char*, E>> options) {
  std::string all;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    all += all.empty() ? name : std::string(", ") + name;
  }
  fail(ErrorCode::invalid_config, "'" + key + "' must be one of " + all + ", got '" + s + "'");
}

inline TaskKind task_from(const std::string& s, const std::string& key) {
  return parse_enum<TaskKind>(s, key, {{"classification", TaskKind::classification}, {"regression", TaskKind::regression}});
}

inline QuantileOutput quantile_output_from(const std::string& s, const std::string& key) {
  return parse_enum<QuantileOutput>(s, key, {{"uniform", QuantileOutput::uniform}, {"gaussian", QuantileOutput::gaussian}});
}

inline const char* to_string(QuantileOutput q) { return q == QuantileOutput::uniform ? "uniform" : "gaussian"; }

inline void read_range(Section& s, const std::string& key, CountRange& out) {
  std::vector<std::size_t> v;
  if (!s.get(key, v)) return;
  if (v.size() != 2) fail(ErrorCode::invalid_config, "'" + s.name(key) + "' must be a [min, max] pair");
  out = {v[0], v[1]};
}

inline void read_train(const json& j, const std::string& path, TrainConfig& t) {
  Section s(j, path);
  s.get("learning_rate", t.learning_rate);
  s.get("weight_decay", t.weight_decay);
  s.get("max_steps", t.max_steps);
  s.get("eval_every", t.eval_every);
  s.get("patience", t.patience);
  s.get("seed", t.seed);
  s.get("support_fraction", t.support_fraction);
  s.get("grad_clip", t.grad_clip);
  std::string sched;
  if (s.get("schedule", sched))
    t.schedule = parse_enum<LrSchedule>(sched, s.name("schedule"), {{"constant", LrSchedule::constant}, {"cosine", LrSchedule::cosine}});
  s.get("warmup_steps", t.warmup_steps);
  s.get("episode_rows", t.episode_rows);
  s.get("validation_episodes", t.validation_episodes);
  s.get("episodes_per_step", t.episodes_per_step);
  s.get("validation_fraction", t.validation_fraction);
  s.finish();
  t.validate();
}

inline json train_to_json(const TrainConfig& t) {
  return {{"regime", to_string(t.regime)},       {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},      {"max_steps", t.max_steps},
          {"eval_every", t.eval_every},          {"patience", t.patience},
          {"seed", t.seed},                      {"support_fraction", t.support_fraction},
          {"grad_clip", t.grad_clip},            {"schedule", to_string(t.schedule)},
          {"warmup_steps", t.warmup_steps},      {"episode_rows", t.episode_rows},
          {"validation_episodes", t.validation_episodes}, {"episodes_per_step", t.episodes_per_step},
          {"validation_fraction", t.validation_fraction}};
}

}  // namespace detail

/// Parses `j` into a config. `regime` picks the training defaults
/// (learning rate, weight decay) that file values then override. Section
/// seeds default to values derived from the global seed.
inline ExperimentConfig resolve_config(const json& j, Regime regime) {
  using detail::Section;
  ExperimentConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("runs_root", c.runs_root);
  c.train = TrainConfig::for_regime(regime);
  c.train.seed = c.seed;
  c.prior.seed = c.seed + 1;
  c.inference.seed = c.seed + 2;

  if (top.has("dataset")) {
    Section s(top.at("dataset"), "dataset");
    DatasetSection d;
    d.split_seed = c.seed + 3;
    s.get("path", d.path);
    std::string task = "classification";
    s.get("task", task);
    d.task = detail::task_from(task, "dataset.task");
    if (s.has("schema")) {
      for (const auto& col : s.at("schema")) {
        Section cs(col, "dataset.schema[]");
        ColumnSchema cschema;
        std::string kind = "numeric";
        cs.get("name", cschema.name);
        cs.get("kind", kind);
        cs.get("target", cschema.is_target);
        cs.finish();
        cschema.kind = detail::parse_enum<ColumnKind>(kind, "dataset.schema[].kind",
                                                      {{"numeric", ColumnKind::numeric}, {"categorical", ColumnKind::categorical}});
        d.schema.push_back(cschema);
      }
    }
    s.get("target", d.target);
    s.get("categorical", d.categorical);
    s.get("train_fraction", d.train_fraction);
    s.get("split_seed", d.split_seed);
    s.finish();
    if (d.path.empty()) fail(ErrorCode::invalid_config, "'dataset.path' is required");
    c.dataset = d;
    c.model.task = d.task;
  }

  if (top.has("model")) {
    Section s(top.at("model"), "model");
    s.get("hidden_dim", c.model.hidden_dim);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("feedforward_dim", c.model.feedforward_dim);
    s.get("max_features", c.model.max_features);
    s.get("max_classes", c.model.max_classes);
    std::string task;
    if (s.get("task", task)) {
      c.model.task = detail::task_from(task, "model.task");
      if (c.dataset && c.dataset->task != c.model.task)
        fail(ErrorCode::invalid_config, "'model.task' disagrees with 'dataset.task'");
    }
    s.get("query_self_attention", c.model.query_self_attention);
    s.finish();
  }
  c.model.validate();

  if (top.has("prior")) {
    Section s(top.at("prior"), "prior");
    s.get("min_rows", c.prior.min_rows);
    s.get("max_rows", c.prior.max_rows);
    detail::read_range(s, "feature_count_range", c.prior.feature_count_range);
    detail::read_range(s, "class_count_range", c.prior.class_count_range);
    detail::read_range(s, "latent_width_range", c.prior.latent_width_range);
    detail::read_range(s, "component_count_range", c.prior.component_count_range);
    s.get("component_separation", c.prior.component_separation);
    s.get("noise_scale", c.prior.noise_scale);
    s.get("discrete_feature_probability", c.prior.discrete_feature_probability);
    std::string act;
    if (s.get("activation", act))
      c.prior.activation = detail::parse_enum<PriorActivation>(
          act, "prior.activation", {{"tanh", PriorActivation::tanh}, {"identity", PriorActivation::identity}});
    std::vector<double> frac;
    if (s.get("support_fraction_range", frac)) {
      if (frac.size() != 2) fail(ErrorCode::invalid_config, "'prior.support_fraction_range' must be a pair");
      c.prior.support_fraction_range = {frac[0], frac[1]};
    }
    s.get("seed", c.prior.seed);
    s.finish();
  }
  c.prior.validate();

  if (top.has("train")) detail::read_train(top.at("train"), "train", c.train);
  c.train.validate();

  if (top.has("inference")) {
    Section s(top.at("inference"), "inference");
    std::string mode;
    if (s.get("mode", mode))
      c.inference.mode = detail::parse_enum<InferenceMode>(
          mode, "inference.mode", {{"full_context", InferenceMode::full_context}, {"ensemble", InferenceMode::ensemble}});
    s.get("support_budget", c.inference.support_budget);
    s.get("subset_size", c.inference.subset_size);
    s.get("subset_fraction", c.inference.subset_fraction);
    s.get("n_ensembles", c.inference.n_ensembles);
    s.get("seed", c.inference.seed);
    s.get("per_observation_subsets", c.inference.per_observation_subsets);
    s.get("query_chunk", c.inference.query_chunk);
    s.finish();
  }

  if (top.has("preprocess")) {
    Section s(top.at("preprocess"), "preprocess");
    s.get("n_quantiles", c.preprocess.n_quantiles);
    std::string out;
    if (s.get("feature_output", out)) c.preprocess.feature_output = detail::quantile_output_from(out, "preprocess.feature_output");
    if (s.get("target_output", out)) c.preprocess.target_output = detail::quantile_output_from(out, "preprocess.target_output");
    s.finish();
  }
  c.preprocess.max_features = c.model.max_features;

  c.bench.finetune.seed = c.bench.scratch.seed = c.seed;
  if (top.has("bench")) {
    Section s(top.at("bench"), "bench");
    s.get("variants", c.bench.variants);
    s.get("seeds", c.bench.seeds);
    s.get("subset_fraction", c.bench.subset_fraction);
    s.get("n_ensembles", c.bench.n_ensembles);
    s.get("classification_tasks", c.bench.classification_tasks);
    s.get("regression_tasks", c.bench.regression_tasks);
    s.get("min_rows", c.bench.min_rows);
    s.get("max_rows", c.bench.max_rows);
    s.get("suite_seed", c.bench.suite_seed);
    if (s.has("finetune")) detail::read_train(s.at("finetune"), "bench.finetune", c.bench.finetune);
    if (s.has("scratch")) detail::read_train(s.at("scratch"), "bench.scratch", c.bench.scratch);
    s.finish();
    for (const auto& v : c.bench.variants) find_variant(v);
  }
  top.finish();
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["runs_root"] = c.runs_root;
  if (c.dataset) {
    const auto& d = *c.dataset;
    json schema = json::array();
    for (const auto& col : d.schema)
      schema.push_back({{"name", col.name}, {"kind", to_string(col.kind)}, {"target", col.is_target}});
    j["dataset"] = {{"path", d.path},         {"task", to_string(d.task)},
                    {"schema", schema},       {"target", d.target},
                    {"categorical", d.categorical}, {"train_fraction", d.train_fraction},
                    {"split_seed", d.split_seed}};
    if (d.schema.empty()) j["dataset"].erase("schema");
  }
  j["model"] = to_json(c.model);
  const auto& p = c.prior;
  j["prior"] = {{"min_rows", p.min_rows},
                {"max_rows", p.max_rows},
                {"feature_count_range", {p.feature_count_range.first, p.feature_count_range.second}},
                {"class_count_range", {p.class_count_range.first, p.class_count_range.second}},
                {"latent_width_range", {p.latent_width_range.first, p.latent_width_range.second}},
                {"component_count_range", {p.component_count_range.first, p.component_count_range.second}},
                {"component_separation", p.component_separation},
                {"noise_scale", p.noise_scale},
                {"discrete_feature_probability", p.discrete_feature_probability},
                {"activation", to_string(p.activation)},
                {"support_fraction_range", {p.support_fraction_range.first, p.support_fraction_range.second}},
                {"seed", p.seed}};
  j["train"] = detail::train_to_json(c.train);
  const auto& i = c.inference;
  j["inference"] = {{"mode", to_string(i.mode)},           {"support_budget", i.support_budget},
                    {"subset_size", i.subset_size},        {"subset_fraction", i.subset_fraction},
                    {"n_ensembles", i.n_ensembles},        {"seed", i.seed},
                    {"per_observation_subsets", i.per_observation_subsets}, {"query_chunk", i.query_chunk}};
  j["preprocess"] = {{"n_quantiles", c.preprocess.n_quantiles},
                     {"feature_output", detail::to_string(c.preprocess.feature_output)},
                     {"target_output", detail::to_string(c.preprocess.target_output)}};
  const auto& b = c.bench;
  j["bench"] = {{"variants", b.variants},
                {"seeds", b.seeds},
                {"subset_fraction", b.subset_fraction},
                {"n_ensembles", b.n_ensembles},
                {"classification_tasks", b.classification_tasks},
                {"regression_tasks", b.regression_tasks},
                {"min_rows", b.min_rows},
                {"max_rows", b.max_rows},
                {"suite_seed", b.suite_seed},
                {"finetune", detail::train_to_json(b.finetune)},
                {"scratch", detail::train_to_json(b.scratch)}};
  // regime is implied by the command, so it is not read back
  j["train"].erase("regime");
  j["bench"]["finetune"].erase("regime");
  j["bench"]["scratch"].erase("regime");
  return j;
}

inline json load_config_json(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::invalid_config, path.string() + ": " + e.what());
  }
}

/// `dotted_key` such as "train.learning_rate"; the value is read as JSON
/// when it parses, as a plain string otherwise.
inline void apply_override(json& j, const std::string& dotted_key, const std::string& value) {
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::invalid_config, "malformed override key '" + dotted_key + "'");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object()) fail(ErrorCode::invalid_config, "override '" + dotted_key + "' descends into a non-object");
    start = dot + 1;
  }
}

/// Fresh run directory. An explicit path must be absent or empty; otherwise
/// a timestamped directory under `root` is created, never reusing one.
inline std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& command,
                                          const std::optional<std::filesystem::path>& explicit_dir) {
  namespace fs = std::filesystem;
  if (explicit_dir) {
    if (fs::exists(*explicit_dir) && !fs::is_empty(*explicit_dir))
      fail(ErrorCode::invalid_config, "run directory " + explicit_dir->string() + " is not empty");
    fs::create_directories(*explicit_dir);
    return *explicit_dir;
  }
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  fs::path dir = root / (std::string(stamp) + "-" + command);
  for (int n = 2; fs::exists(dir); ++n) dir = root / (std::string(stamp) + "-" + command + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

inline void write_frozen_config(const std::filesystem::path& run_dir, const ExperimentConfig& c) {
  std::ofstream(run_dir / "config.json") << to_json(c).dump(2) << '\n';
}

/// Loads the configured dataset, taking column names from its header when
/// the config gives only a target name.
inline Dataset load_configured_dataset(const DatasetSection& d, std::size_t max_features) {
  std::vector<ColumnSchema> schema = d.schema;
  if (schema.empty()) {
    const auto rows = csv::parse(read_text_file(d.path));
    if (rows.empty()) fail(ErrorCode::parse_error, d.path + " is empty");
    schema = d.resolve_schema(rows.front());
  }
  return load_dataset_csv(d.path, schema, d.task, max_features);
}

}  // namespace pfnlab
