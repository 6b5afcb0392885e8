#pragma once

// The retrieval transformer. Every observation becomes one token; support
// tokens carry their label through the label projection, query tokens do
// not. Queries attend the support set and themselves, never each other.
//
// Gradients are derived by hand for the fixed architecture below, so there
// is no tape: `forward` optionally fills a cache and `backward` walks it in
// reverse.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfnlab/dataio.hpp"
#include "pfnlab/error.hpp"
#include "pfnlab/preprocess.hpp"

namespace pfnlab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  std::size_t hidden_dim = 256;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t feedforward_dim = 512;
  std::size_t max_features = kDefaultMaxFeatures;
  std::size_t max_classes = kMaxClasses;
  TaskKind task = TaskKind::classification;
  bool query_self_attention = true;

  std::size_t output_dim() const { return task == TaskKind::classification ? max_classes : 1; }
  std::size_t head_dim() const { return hidden_dim / n_heads; }

  void validate() const {
    if (hidden_dim == 0 || n_heads == 0 || feedforward_dim == 0 || max_features == 0)
      fail(ErrorCode::invalid_config, "model dimensions must be positive");
    if (hidden_dim % n_heads != 0)
      fail(ErrorCode::invalid_config, "hidden_dim " + std::to_string(hidden_dim) + " is not divisible by n_heads " +
                                          std::to_string(n_heads));
    if (task == TaskKind::classification && (max_classes < 2 || max_classes > kMaxClasses))
      fail(ErrorCode::invalid_config, "max_classes must lie in [2, " + std::to_string(kMaxClasses) + "]");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct TensorView {
  std::string name;
  T* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  std::span<T> span() const { return {data, static_cast<std::size_t>(size())}; }
};

template <class T>
struct LayerParams {
  Vec<T> norm1_gain, norm1_bias;
  Mat<T> wq, wk, wv, wo;  // hidden × hidden, (out, in)
  Vec<T> bq, bk, bv, bo;
  Vec<T> norm2_gain, norm2_bias;
  Mat<T> w1;  // feedforward × hidden
  Vec<T> b1;
  Mat<T> w2;  // hidden × feedforward
  Vec<T> b2;
};

template <class T>
struct ModelParams {
  Mat<T> feature_proj;  // W_x: hidden × max_features
  Vec<T> label_proj;    // w_y: hidden
  std::vector<LayerParams<T>> layers;
  Vec<T> final_gain, final_bias;
  Mat<T> head;  // output_dim × hidden
  Vec<T> head_bias;

  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    const auto d = static_cast<Eigen::Index>(c.hidden_dim);
    const auto ff = static_cast<Eigen::Index>(c.feedforward_dim);
    ModelParams p;
    p.feature_proj = Mat<T>::Zero(d, static_cast<Eigen::Index>(c.max_features));
    p.label_proj = Vec<T>::Zero(d);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
      l.norm1_gain = Vec<T>::Zero(d);
      l.norm1_bias = Vec<T>::Zero(d);
      l.wq = l.wk = l.wv = l.wo = Mat<T>::Zero(d, d);
      l.bq = l.bk = l.bv = l.bo = Vec<T>::Zero(d);
      l.norm2_gain = Vec<T>::Zero(d);
      l.norm2_bias = Vec<T>::Zero(d);
      l.w1 = Mat<T>::Zero(ff, d);
      l.b1 = Vec<T>::Zero(ff);
      l.w2 = Mat<T>::Zero(d, ff);
      l.b2 = Vec<T>::Zero(d);
    }
    p.final_gain = Vec<T>::Zero(d);
    p.final_bias = Vec<T>::Zero(d);
    p.head = Mat<T>::Zero(static_cast<Eigen::Index>(c.output_dim()), d);
    p.head_bias = Vec<T>::Zero(static_cast<Eigen::Index>(c.output_dim()));
    return p;
  }

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gains 1; biases and
  /// the output head 0.
  static ModelParams initialize(const ModelConfig& c, std::mt19937_64& rng) {
    ModelParams p = zeros(c);
    auto fill = [&rng](auto& m, std::size_t fan_in) {
      const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(u(rng));
    };
    fill(p.feature_proj, c.max_features);
    fill(p.label_proj, 1);
    for (auto& l : p.layers) {
      l.norm1_gain.setOnes();
      l.norm2_gain.setOnes();
      fill(l.wq, c.hidden_dim);
      fill(l.wk, c.hidden_dim);
      fill(l.wv, c.hidden_dim);
      fill(l.wo, c.hidden_dim);
      fill(l.w1, c.hidden_dim);
      fill(l.w2, c.feedforward_dim);
    }
    p.final_gain.setOnes();
    return p;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::vector<TensorView<T>> tensors() {
    std::vector<TensorView<T>> out;
    visit([&](const std::string& name, auto& m) { out.push_back({name, m.data(), m.rows(), m.cols()}); });
    return out;
  }
  std::vector<TensorView<const T>> tensors() const {
    std::vector<TensorView<const T>> out;
    visit([&](const std::string& name, const auto& m) { out.push_back({name, m.data(), m.rows(), m.cols()}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const auto& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.feature_proj = feature_proj.template cast<U>();
    out.label_proj = label_proj.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& s = layers[i];
      auto& t = out.layers[i];
      t.norm1_gain = s.norm1_gain.template cast<U>();
      t.norm1_bias = s.norm1_bias.template cast<U>();
      t.wq = s.wq.template cast<U>();
      t.wk = s.wk.template cast<U>();
      t.wv = s.wv.template cast<U>();
      t.wo = s.wo.template cast<U>();
      t.bq = s.bq.template cast<U>();
      t.bk = s.bk.template cast<U>();
      t.bv = s.bv.template cast<U>();
      t.bo = s.bo.template cast<U>();
      t.norm2_gain = s.norm2_gain.template cast<U>();
      t.norm2_bias = s.norm2_bias.template cast<U>();
      t.w1 = s.w1.template cast<U>();
      t.b1 = s.b1.template cast<U>();
      t.w2 = s.w2.template cast<U>();
      t.b2 = s.b2.template cast<U>();
    }
    out.final_gain = final_gain.template cast<U>();
    out.final_bias = final_bias.template cast<U>();
    out.head = head.template cast<U>();
    out.head_bias = head_bias.template cast<U>();
    return out;
  }

  bool operator==(const ModelParams& o) const {
    const auto a = tensors();
    const auto b = o.tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].rows != b[i].rows || a[i].cols != b[i].cols) return false;
      if (!std::equal(a[i].data, a[i].data + a[i].size(), b[i].data)) return false;
    }
    return true;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("feature_proj", s.feature_proj);
    f("label_proj", s.label_proj);
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      auto& l = s.layers[i];
      const std::string pre = "layers." + std::to_string(i) + ".";
      f(pre + "norm1.gain", l.norm1_gain);
      f(pre + "norm1.bias", l.norm1_bias);
      f(pre + "attn.wq", l.wq);
      f(pre + "attn.wk", l.wk);
      f(pre + "attn.wv", l.wv);
      f(pre + "attn.wo", l.wo);
      f(pre + "attn.bq", l.bq);
      f(pre + "attn.bk", l.bk);
      f(pre + "attn.bv", l.bv);
      f(pre + "attn.bo", l.bo);
      f(pre + "norm2.gain", l.norm2_gain);
      f(pre + "norm2.bias", l.norm2_bias);
      f(pre + "ff.w1", l.w1);
      f(pre + "ff.b1", l.b1);
      f(pre + "ff.w2", l.w2);
      f(pre + "ff.b2", l.b2);
    }
    f("final_norm.gain", s.final_gain);
    f("final_norm.bias", s.final_bias);
    f("head.weight", s.head);
    f("head.bias", s.head_bias);
  }
};

/// Copies every tensor except the output head, which is re-created at zero
/// for `target`'s task. Used to fine-tune a classification checkpoint on a
/// regression dataset.
template <class T>
ModelParams<T> adapt_head(const ModelParams<T>& p, const ModelConfig& target) {
  ModelParams<T> out = p;
  out.head = Mat<T>::Zero(static_cast<Eigen::Index>(target.output_dim()), p.head.cols());
  out.head_bias = Vec<T>::Zero(static_cast<Eigen::Index>(target.output_dim()));
  return out;
}

// ---------------------------------------------------------------------------

/// One model input. Support rows come first in the token ordering.
template <class T>
struct Episode {
  Mat<T> support_x;
  Vec<T> support_y;
  Mat<T> query_x;
  std::optional<Vec<T>> query_y;
  std::size_t n_classes = 0;

  std::size_t n_support() const { return static_cast<std::size_t>(support_x.rows()); }
  std::size_t n_query() const { return static_cast<std::size_t>(query_x.rows()); }
  std::size_t n_tokens() const { return n_support() + n_query(); }
};

template <class T>
Episode<T> make_episode(const PreparedSet& support, std::span<const std::size_t> support_rows,
                        const ProcessedMatrix& queries, std::span<const std::size_t> query_rows,
                        const std::vector<double>* query_targets = nullptr) {
  Episode<T> e;
  const auto width = support.features.values.cols();
  e.support_x.resize(static_cast<Eigen::Index>(support_rows.size()), width);
  e.support_y.resize(static_cast<Eigen::Index>(support_rows.size()));
  for (std::size_t i = 0; i < support_rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(support_rows[i]);
    e.support_x.row(static_cast<Eigen::Index>(i)) = support.features.values.row(r).template cast<T>();
    e.support_y(static_cast<Eigen::Index>(i)) = static_cast<T>(support.targets[support_rows[i]]);
  }
  e.query_x.resize(static_cast<Eigen::Index>(query_rows.size()), queries.values.cols());
  for (std::size_t i = 0; i < query_rows.size(); ++i)
    e.query_x.row(static_cast<Eigen::Index>(i)) =
        queries.values.row(static_cast<Eigen::Index>(query_rows[i])).template cast<T>();
  if (query_targets) {
    Vec<T> y(static_cast<Eigen::Index>(query_rows.size()));
    for (std::size_t i = 0; i < query_rows.size(); ++i)
      y(static_cast<Eigen::Index>(i)) = static_cast<T>((*query_targets)[query_rows[i]]);
    e.query_y = std::move(y);
  }
  e.n_classes = support.n_classes;
  return e;
}

// ---------------------------------------------------------------------------

/// Row = attender, column = attended; support tokens occupy indices
/// [0, n_support).
struct AttentionMask {
  std::size_t n_support = 0;
  std::size_t n_query = 0;
  std::vector<std::uint8_t> allowed;

  std::size_t size() const { return n_support + n_query; }
  bool operator()(std::size_t row, std::size_t col) const { return allowed[row * size() + col] != 0; }
};

inline AttentionMask build_mask(std::size_t n_support, std::size_t n_query, bool query_self_attention = true) {
  if (n_support == 0 || n_query == 0)
    fail(ErrorCode::dimension_mismatch, "an episode needs at least one support and one query token");
  AttentionMask m{n_support, n_query, {}};
  const std::size_t n = m.size();
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n_support; ++j) m.allowed[i * n + j] = 1;
    if (i >= n_support && query_self_attention) m.allowed[i * n + i] = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace detail {

template <class T>
struct NormCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <class T>
struct LayerCache {
  NormCache<T> norm1;
  Mat<T> h1, q, k, v;
  std::vector<Mat<T>> probs;       // per head: tokens × n_support
  std::vector<Vec<T>> self_probs;  // per head: weight of each query on itself
  Mat<T> attn;
  NormCache<T> norm2;
  Mat<T> h2, pre_act, act;
};

template <class T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  NormCache<T> final_norm;
  Mat<T> final_hidden;
};

template <class T>
inline constexpr T kNormEps = T(1e-5);

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Vec<T>& gain, const Vec<T>& bias, NormCache<T>* cache) {
  const Vec<T> mean = x.rowwise().mean();
  Mat<T> xhat = x.colwise() - mean;
  const Vec<T> var = xhat.array().square().rowwise().mean();
  const Vec<T> rstd = (var.array() + kNormEps<T>).rsqrt();
  xhat.array().colwise() *= rstd.array();
  Mat<T> y = (xhat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = rstd;
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Vec<T>& gain, const NormCache<T>& cache, Vec<T>& dgain,
                           Vec<T>& dbias) {
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  dgain += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  dbias += dy.colwise().sum().transpose();
  Mat<T> dxhat = dy.array().rowwise() * gain.transpose().array();
  const Vec<T> mean_dxhat = dxhat.rowwise().mean();
  const Vec<T> mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum().matrix() * inv_d;
  dxhat.array().colwise() -= mean_dxhat.array();
  dxhat.array() -= cache.xhat.array().colwise() * mean_dxhat_xhat.array();
  dxhat.array().colwise() *= cache.rstd.array();
  return dxhat;
}

template <class T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T u) {
  const T cdf = T(0.5) * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * u * u) * T(0.3989422804014327);
  return cdf + u * pdf;
}

}  // namespace detail

template <class T>
void check_episode(const Episode<T>& e, const ModelConfig& c) {
  const auto w = static_cast<Eigen::Index>(c.max_features);
  if (e.n_support() == 0 || e.n_query() == 0)
    fail(ErrorCode::dimension_mismatch, "episode needs at least one support and one query row");
  if (e.support_x.cols() != w || e.query_x.cols() != w)
    fail(ErrorCode::dimension_mismatch, "episode width " + std::to_string(e.support_x.cols()) + "/" +
                                            std::to_string(e.query_x.cols()) + " differs from max_features " +
                                            std::to_string(c.max_features));
  if (e.support_y.size() != e.support_x.rows())
    fail(ErrorCode::dimension_mismatch, "support labels and support rows differ in count");
  if (e.query_y && e.query_y->size() != e.query_x.rows())
    fail(ErrorCode::dimension_mismatch, "query labels and query rows differ in count");
  if (c.task == TaskKind::classification && e.n_classes > c.max_classes)
    fail(ErrorCode::dimension_mismatch, "episode has more classes than the model's max_classes");
}

/// Tokens for the episode: support rows W_x x + w_y y, then query rows W_x x.
template <class T>
Mat<T> embed_tokens(const Episode<T>& e, const ModelParams<T>& p) {
  if (e.support_x.cols() != p.feature_proj.cols() || e.query_x.cols() != p.feature_proj.cols())
    fail(ErrorCode::dimension_mismatch, "episode width differs from the feature projection");
  if (e.support_y.size() != e.support_x.rows())
    fail(ErrorCode::dimension_mismatch, "support labels and support rows differ in count");
  const auto ns = e.support_x.rows();
  const auto nq = e.query_x.rows();
  Mat<T> z(ns + nq, p.feature_proj.rows());
  z.topRows(ns).noalias() = e.support_x * p.feature_proj.transpose();
  z.topRows(ns).noalias() += e.support_y * p.label_proj.transpose();
  z.bottomRows(nq).noalias() = e.query_x * p.feature_proj.transpose();
  return z;
}

namespace detail {

/// One pre-norm block applied in place to the token matrix `z`.
template <class T>
void layer_forward(Mat<T>& z, const LayerParams<T>& l, const ModelConfig& c, Eigen::Index ns, LayerCache<T>* cache) {
  const Eigen::Index n = z.rows();
  const Eigen::Index nq = n - ns;
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  NormCache<T>* nc1 = cache ? &cache->norm1 : nullptr;
  Mat<T> h1 = layer_norm(z, l.norm1_gain, l.norm1_bias, nc1);
  Mat<T> q = (h1 * l.wq.transpose()).rowwise() + l.bq.transpose();
  Mat<T> k = (h1 * l.wk.transpose()).rowwise() + l.bk.transpose();
  Mat<T> v = (h1 * l.wv.transpose()).rowwise() + l.bv.transpose();
  Mat<T> attn(n, z.cols());
  if (cache) {
    cache->probs.resize(c.n_heads);
    cache->self_probs.resize(c.n_heads);
  }
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const auto qh = q.middleCols(off, dh);
    const auto kh = k.middleCols(off, dh);
    const auto vh = v.middleCols(off, dh);
    Mat<T> s(n, ns);
    s.noalias() = qh * kh.topRows(ns).transpose();
    s *= scale;
    Vec<T> row_max = s.rowwise().maxCoeff();
    Vec<T> self_s;
    if (c.query_self_attention) {
      self_s = (qh.bottomRows(nq).array() * kh.bottomRows(nq).array()).rowwise().sum().matrix() * scale;
      row_max.tail(nq) = row_max.tail(nq).cwiseMax(self_s);
    }
    s.colwise() -= row_max;
    s = s.array().exp().matrix();
    Vec<T> denom = s.rowwise().sum();
    Vec<T> self_p;
    if (c.query_self_attention) {
      self_p = (self_s - row_max.tail(nq)).array().exp().matrix();
      denom.tail(nq) += self_p;
      self_p.array() /= denom.tail(nq).array();
    }
    s.array().colwise() /= denom.array();
    auto out = attn.middleCols(off, dh);
    out.noalias() = s * vh.topRows(ns);
    if (c.query_self_attention) out.bottomRows(nq).array() += vh.bottomRows(nq).array().colwise() * self_p.array();
    if (cache) {
      cache->probs[h] = std::move(s);
      cache->self_probs[h] = std::move(self_p);
    }
  }
  z.noalias() += attn * l.wo.transpose();
  z.rowwise() += l.bo.transpose();

  NormCache<T>* nc2 = cache ? &cache->norm2 : nullptr;
  Mat<T> h2 = layer_norm(z, l.norm2_gain, l.norm2_bias, nc2);
  Mat<T> pre = (h2 * l.w1.transpose()).rowwise() + l.b1.transpose();
  Mat<T> act = pre.unaryExpr([](T u) { return gelu(u); });
  z.noalias() += act * l.w2.transpose();
  z.rowwise() += l.b2.transpose();

  if (cache) {
    cache->h1 = std::move(h1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->h2 = std::move(h2);
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
}

template <class T>
Mat<T> forward_impl(const Episode<T>& e, const ModelParams<T>& p, const ModelConfig& c, ForwardCache<T>* cache) {
  check_episode(e, c);
  if (p.layers.size() != c.n_layers) fail(ErrorCode::dimension_mismatch, "parameter layer count differs from config");
  const auto ns = static_cast<Eigen::Index>(e.n_support());
  const auto nq = static_cast<Eigen::Index>(e.n_query());
  Mat<T> z = embed_tokens(e, p);
  if (cache) cache->layers.resize(c.n_layers);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    layer_forward(z, p.layers[i], c, ns, cache ? &cache->layers[i] : nullptr);
    if (!z.allFinite()) fail(ErrorCode::non_finite_activation, "non-finite activation after layer " + std::to_string(i));
  }
  NormCache<T>* nc = cache ? &cache->final_norm : nullptr;
  Mat<T> hidden = layer_norm(Mat<T>(z.bottomRows(nq)), p.final_gain, p.final_bias, nc);
  Mat<T> out = (hidden * p.head.transpose()).rowwise() + p.head_bias.transpose();
  if (!out.allFinite()) fail(ErrorCode::non_finite_activation, "non-finite output at layer " + std::to_string(c.n_layers));
  if (cache) cache->final_hidden = std::move(hidden);
  return out;
}

}  // namespace detail

/// Query outputs: n_query × max_classes logits, or n_query × 1 for
/// regression. Support-token outputs are discarded.
template <class T>
Mat<T> forward(const Episode<T>& e, const ModelParams<T>& p, const ModelConfig& c) {
  return detail::forward_impl(e, p, c, static_cast<detail::ForwardCache<T>*>(nullptr));
}

/// Effective class count of an episode for the softmax.
inline std::size_t class_count(std::size_t episode_classes, const ModelConfig& c) {
  return episode_classes == 0 ? c.max_classes : std::min(episode_classes, c.max_classes);
}

/// Row-wise softmax over the first `k` columns with max subtraction.
template <class T>
Mat<T> softmax_rows(const Mat<T>& logits, std::size_t k) {
  const auto kk = static_cast<Eigen::Index>(k);
  Mat<T> p = logits.leftCols(kk);
  const Vec<T> m = p.rowwise().maxCoeff();
  p.colwise() -= m;
  p = p.array().exp().matrix();
  const Vec<T> s = p.rowwise().sum();
  p.array().colwise() /= s.array();
  return p;
}

template <class T>
struct LossResult {
  T value = T(0);
  Mat<T> grad;  // d loss / d outputs
};

/// Mean cross-entropy over the first `n_classes` logits, or mean squared
/// error for regression.
template <class T>
LossResult<T> loss_with_gradient(const Mat<T>& outputs, const Vec<T>& targets, TaskKind task, std::size_t n_classes) {
  if (outputs.rows() != targets.size()) fail(ErrorCode::length_mismatch, "outputs and targets differ in count");
  const auto n = outputs.rows();
  LossResult<T> r;
  r.grad = Mat<T>::Zero(outputs.rows(), outputs.cols());
  if (task == TaskKind::regression) {
    const Vec<T> diff = outputs.col(0) - targets;
    r.value = diff.squaredNorm() / static_cast<T>(n);
    r.grad.col(0) = diff * (T(2) / static_cast<T>(n));
    return r;
  }
  const std::size_t k = n_classes == 0 ? static_cast<std::size_t>(outputs.cols()) : n_classes;
  const Mat<T> probs = softmax_rows(outputs, k);
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = static_cast<Eigen::Index>(targets(i));
    if (y < 0 || y >= static_cast<Eigen::Index>(k))
      fail(ErrorCode::dimension_mismatch, "class index " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const auto row = outputs.row(i).head(static_cast<Eigen::Index>(k));
    const T m = row.maxCoeff();
    const T lse = m + std::log((row.array() - m).exp().sum());
    total += lse - outputs(i, y);
    r.grad.row(i).head(static_cast<Eigen::Index>(k)) = probs.row(i);
    r.grad(i, y) -= T(1);
  }
  r.value = total / static_cast<T>(n);
  r.grad /= static_cast<T>(n);
  return r;
}

template <class T>
T loss(const Mat<T>& outputs, const Vec<T>& targets, TaskKind task, std::size_t n_classes = 0) {
  return loss_with_gradient(outputs, targets, task, n_classes).value;
}

template <class T>
struct LossAndGradient {
  T loss = T(0);
  ModelParams<T> grads;
};

/// Exact gradient of the mean query loss with respect to every parameter.
template <class T>
LossAndGradient<T> backward(const Episode<T>& e, const ModelParams<T>& p, const ModelConfig& c) {
  if (!e.query_y) fail(ErrorCode::dimension_mismatch, "backward needs query labels");
  detail::ForwardCache<T> cache;
  const Mat<T> out = detail::forward_impl(e, p, c, &cache);
  const std::size_t k = class_count(e.n_classes, c);
  LossResult<T> lr = loss_with_gradient(out, *e.query_y, c.task, k);

  const auto ns = static_cast<Eigen::Index>(e.n_support());
  const auto nq = static_cast<Eigen::Index>(e.n_query());
  const auto n = ns + nq;
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  LossAndGradient<T> res;
  res.loss = lr.value;
  ModelParams<T>& g = res.grads;
  g = ModelParams<T>::zeros(c);

  g.head.noalias() = lr.grad.transpose() * cache.final_hidden;
  g.head_bias = lr.grad.colwise().sum().transpose();
  const Mat<T> dhidden = lr.grad * p.head;
  Mat<T> dz = Mat<T>::Zero(n, d);
  dz.bottomRows(nq) = detail::layer_norm_backward(dhidden, p.final_gain, cache.final_norm, g.final_gain, g.final_bias);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& l = p.layers[li];
    auto& gl = g.layers[li];
    const auto& lc = cache.layers[li];

    // Feedforward branch.
    gl.w2.noalias() = dz.transpose() * lc.act;
    gl.b2 = dz.colwise().sum().transpose();
    Mat<T> dpre = dz * l.w2;
    dpre.array() *= lc.pre_act.unaryExpr([](T u) { return detail::gelu_grad(u); }).array();
    gl.w1.noalias() = dpre.transpose() * lc.h2;
    gl.b1 = dpre.colwise().sum().transpose();
    const Mat<T> dh2 = dpre * l.w1;
    dz += detail::layer_norm_backward(dh2, l.norm2_gain, lc.norm2, gl.norm2_gain, gl.norm2_bias);

    // Attention branch.
    gl.wo.noalias() = dz.transpose() * lc.attn;
    gl.bo = dz.colwise().sum().transpose();
    const Mat<T> dattn = dz * l.wo;
    Mat<T> dq = Mat<T>::Zero(n, d);
    Mat<T> dk = Mat<T>::Zero(n, d);
    Mat<T> dv = Mat<T>::Zero(n, d);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const auto qh = lc.q.middleCols(off, dh);
      const auto kh = lc.k.middleCols(off, dh);
      const auto vh = lc.v.middleCols(off, dh);
      const auto dout = dattn.middleCols(off, dh);
      const Mat<T>& probs = lc.probs[h];

      Mat<T> dp(n, ns);
      dp.noalias() = dout * vh.topRows(ns).transpose();
      dv.middleCols(off, dh).topRows(ns).noalias() = probs.transpose() * dout;
      Vec<T> row_dot = (probs.array() * dp.array()).rowwise().sum();
      Vec<T> dself_p;
      if (c.query_self_attention) {
        const Vec<T>& self_p = lc.self_probs[h];
        dself_p = (dout.bottomRows(nq).array() * vh.bottomRows(nq).array()).rowwise().sum();
        dv.middleCols(off, dh).bottomRows(nq).array() += dout.bottomRows(nq).array().colwise() * self_p.array();
        row_dot.tail(nq).array() += self_p.array() * dself_p.array();
      }
      // Softmax Jacobian: ds = p * (dp - <p, dp>).
      dp.colwise() -= row_dot;
      dp.array() *= probs.array();
      dq.middleCols(off, dh).noalias() = dp * kh.topRows(ns);
      dk.middleCols(off, dh).topRows(ns).noalias() = dp.transpose() * qh;
      if (c.query_self_attention) {
        const Vec<T>& self_p = lc.self_probs[h];
        const Vec<T> dself_s = (self_p.array() * (dself_p - row_dot.tail(nq)).array()).matrix();
        dq.middleCols(off, dh).bottomRows(nq).array() += kh.bottomRows(nq).array().colwise() * dself_s.array();
        dk.middleCols(off, dh).bottomRows(nq).array() += qh.bottomRows(nq).array().colwise() * dself_s.array();
      }
    }
    dq *= scale;
    dk *= scale;
    gl.wq.noalias() = dq.transpose() * lc.h1;
    gl.wk.noalias() = dk.transpose() * lc.h1;
    gl.wv.noalias() = dv.transpose() * lc.h1;
    gl.bq = dq.colwise().sum().transpose();
    gl.bk = dk.colwise().sum().transpose();
    gl.bv = dv.colwise().sum().transpose();
    Mat<T> dh1 = dq * l.wq;
    dh1.noalias() += dk * l.wk;
    dh1.noalias() += dv * l.wv;
    dz += detail::layer_norm_backward(dh1, l.norm1_gain, lc.norm1, gl.norm1_gain, gl.norm1_bias);
  }

  g.feature_proj.noalias() = dz.topRows(ns).transpose() * e.support_x;
  g.feature_proj.noalias() += dz.bottomRows(nq).transpose() * e.query_x;
  g.label_proj.noalias() = dz.topRows(ns).transpose() * e.support_y;

  if (!g.all_finite()) fail(ErrorCode::non_finite_gradient, "non-finite gradient");
  return res;
}

/// n_query × K class probabilities, K being the episode's class count.
template <class T>
Mat<T> predict_proba(const Episode<T>& e, const ModelParams<T>& p, const ModelConfig& c) {
  if (c.task != TaskKind::classification) fail(ErrorCode::invalid_config, "predict_proba needs a classification model");
  return softmax_rows(forward(e, p, c), class_count(e.n_classes, c));
}

}  // namespace pfnlab
