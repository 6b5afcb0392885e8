#pragma once

// Checkpoint container: an 8-byte magic, a little-endian u64 header length,
// a JSON header (format version, model config, tensor table, free-form
// metadata) and then every tensor as contiguous float64 values in
// column-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfnlab/error.hpp"
#include "pfnlab/model.hpp"

namespace pfnlab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'P', 'F', 'N', 'L', 'A', 'B', 'C', 'K'};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden_dim", c.hidden_dim},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},               {"feedforward_dim", c.feedforward_dim},
          {"max_features", c.max_features},     {"max_classes", c.max_classes},
          {"task", to_string(c.task)},          {"query_self_attention", c.query_self_attention}};
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  fail(ErrorCode::invalid_config, "unknown task '" + s + "'");
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.feedforward_dim = j.at("feedforward_dim").get<std::size_t>();
  c.max_features = j.at("max_features").get<std::size_t>();
  c.max_classes = j.at("max_classes").get<std::size_t>();
  c.task = parse_task(j.at("task").get<std::string>());
  c.query_self_attention = j.at("query_self_attention").get<bool>();
  return c;
}

/// Name of the first field where `actual` differs from `expected`, or empty.
inline std::string first_config_mismatch(const ModelConfig& expected, const ModelConfig& actual,
                                         bool ignore_task = false) {
  if (expected.hidden_dim != actual.hidden_dim) return "hidden_dim";
  if (expected.n_layers != actual.n_layers) return "n_layers";
  if (expected.n_heads != actual.n_heads) return "n_heads";
  if (expected.feedforward_dim != actual.feedforward_dim) return "feedforward_dim";
  if (expected.max_features != actual.max_features) return "max_features";
  if (!ignore_task && expected.task != actual.task) return "task";
  if (!ignore_task && expected.max_classes != actual.max_classes && expected.task == TaskKind::classification)
    return "max_classes";
  if (expected.query_self_attention != actual.query_self_attention) return "query_self_attention";
  return {};
}

struct NamedTensor {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  ModelConfig config;
  std::vector<NamedTensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <class T>
void append_tensors(std::vector<NamedTensor>& out, const ModelParams<T>& p, const std::string& prefix = "") {
  for (const auto& t : p.tensors()) {
    NamedTensor nt{prefix + t.name, t.rows, t.cols, {}};
    nt.data.assign(t.data, t.data + t.size());
    out.push_back(std::move(nt));
  }
}

/// Fills `p` (already shaped for the expected config) from the checkpoint,
/// failing on the first missing or mis-shaped tensor.
template <class T>
void extract_tensors(const Checkpoint& ck, ModelParams<T>& p, const std::string& prefix = "") {
  for (auto& t : p.tensors()) {
    const NamedTensor* src = ck.find(prefix + t.name);
    if (!src) fail(ErrorCode::checkpoint_mismatch, "tensor '" + prefix + t.name + "' is missing");
    if (src->rows != t.rows || src->cols != t.cols)
      fail(ErrorCode::checkpoint_mismatch, "tensor '" + prefix + t.name + "' has shape [" + std::to_string(src->rows) +
                                               "," + std::to_string(src->cols) + "], expected [" +
                                               std::to_string(t.rows) + "," + std::to_string(t.cols) + "]");
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(src->data[static_cast<std::size_t>(i)]);
  }
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = ck.format_version;
  header["model_config"] = to_json(ck.config);
  header["metadata"] = ck.metadata;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.rows * t.cols)
      fail(ErrorCode::dimension_mismatch, "tensor '" + t.name + "' data does not match its shape");
    table.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += t.data.size() * sizeof(double);
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io_error, "cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ck.tensors)
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!out) fail(ErrorCode::io_error, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::file_not_found, path.string());
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    fail(ErrorCode::checkpoint_mismatch, path.string() + " is not a checkpoint file");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1ull << 32))
    fail(ErrorCode::checkpoint_mismatch, "corrupt checkpoint header in " + path.string());
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len)))
    fail(ErrorCode::checkpoint_mismatch, "truncated checkpoint header in " + path.string());

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.format_version = header.at("format_version").get<int>();
    if (ck.format_version != kCheckpointFormatVersion)
      fail(ErrorCode::checkpoint_mismatch, "unsupported checkpoint format version " + std::to_string(ck.format_version));
    ck.config = model_config_from_json(header.at("model_config"));
    ck.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.rows = entry.at("shape").at(0).get<std::int64_t>();
      t.cols = entry.at("shape").at(1).get<std::int64_t>();
      t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::checkpoint_mismatch, std::string("malformed checkpoint header: ") + e.what());
  }
  for (auto& t : ck.tensors)
    if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double))))
      fail(ErrorCode::checkpoint_mismatch, "truncated tensor data for '" + t.name + "'");
  return ck;
}

template <class T>
void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ModelParams<T>& params,
                nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = cfg;
  ck.metadata = std::move(metadata);
  append_tensors(ck.tensors, params);
  write_checkpoint(path, ck);
}

/// Loads parameters and checks the stored config against `expected`. With
/// `allow_task_change`, a checkpoint for another task is accepted and its
/// output head is replaced by a zero head for `expected.task`.
template <class T>
ModelParams<T> load_model(const std::filesystem::path& path, const ModelConfig& expected,
                          bool allow_task_change = false) {
  const Checkpoint ck = read_checkpoint(path);
  const std::string mismatch = first_config_mismatch(expected, ck.config, allow_task_change);
  if (!mismatch.empty())
    fail(ErrorCode::checkpoint_mismatch, "checkpoint field '" + mismatch + "' differs from the configured model");
  ModelParams<T> p = ModelParams<T>::zeros(ck.config);
  extract_tensors(ck, p);
  if (!p.all_finite()) fail(ErrorCode::checkpoint_mismatch, "checkpoint contains non-finite values");
  return ck.config.task == expected.task && ck.config.max_classes == expected.max_classes ? p : adapt_head(p, expected);
}

}  // namespace pfnlab
