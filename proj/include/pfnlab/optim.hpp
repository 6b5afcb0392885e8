#pragma once

#include <cmath>
#include <numbers>

#include "pfnlab/error.hpp"
#include "pfnlab/model.hpp"

namespace pfnlab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  ModelParams<T> first_moment;
  ModelParams<T> second_moment;
  std::size_t step = 0;

  static AdamState zeros(const ModelConfig& c) {
    return {ModelParams<T>::zeros(c), ModelParams<T>::zeros(c), 0};
  }
};

template <class T>
double global_norm(const ModelParams<T>& g) {
  double total = 0;
  g.visit([&](const std::string&, const auto& m) { total += static_cast<double>(m.squaredNorm()); });
  return std::sqrt(total);
}

/// Rescales `g` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_global_norm(ModelParams<T>& g, double max_norm) {
  const double norm = global_norm(g);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    g.visit([&](const std::string&, auto& m) { m *= s; });
  }
  return norm;
}

/// Decoupled weight decay, then the bias-corrected adaptive step:
///   p <- p * (1 - lr * wd)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
template <class T>
void adamw_update(ModelParams<T>& params, AdamState<T>& state, const ModelParams<T>& grads, double lr,
                  double weight_decay, const AdamWConfig& hp = {}) {
  auto p = params.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  const auto g = grads.tensors();
  if (p.size() != g.size()) fail(ErrorCode::dimension_mismatch, "gradient and parameter tensor counts differ");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(hp.beta1);
  const T b2 = static_cast<T>(hp.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(hp.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(hp.beta2, t));
  const T decay = static_cast<T>(1.0 - lr * weight_decay);
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(hp.epsilon);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].size() != g[i].size()) fail(ErrorCode::dimension_mismatch, "gradient shape differs for " + p[i].name);
    using A = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<A> pm(p[i].data, p[i].size());
    Eigen::Map<A> mm(m[i].data, m[i].size());
    Eigen::Map<A> vm(v[i].data, v[i].size());
    Eigen::Map<const A> gm(g[i].data, g[i].size());
    mm = b1 * mm + (T(1) - b1) * gm;
    vm = b2 * vm + (T(1) - b2) * gm.square();
    pm *= decay;
    pm -= step * (mm / bc1) / ((vm / bc2).sqrt() + eps);
    if (!pm.allFinite()) fail(ErrorCode::non_finite_update, "non-finite value in " + p[i].name + " after update");
  }
}

enum class LrSchedule { constant, cosine };

/// Learning rate for the update that follows `completed_steps` updates.
inline double scheduled_lr(double base, LrSchedule schedule, std::size_t completed_steps, std::size_t total_steps,
                           std::size_t warmup_steps = 0) {
  double lr = base;
  if (schedule == LrSchedule::cosine && total_steps > 0) {
    const double progress = std::min(1.0, static_cast<double>(completed_steps) / static_cast<double>(total_steps));
    lr = base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  if (warmup_steps > 0 && completed_steps < warmup_steps)
    lr *= static_cast<double>(completed_steps + 1) / static_cast<double>(warmup_steps);
  return lr;
}

}  // namespace pfnlab
