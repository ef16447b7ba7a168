#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tfm/error.hpp"
#include "tfm/model.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

/// One gradient tensor per model parameter, in parameter order.
using Gradients = std::vector<Tensor>;

/// Global L2 norm accumulated in double, parameters in order.
inline double global_norm(const Gradients& grads) {
  double sum = 0.0;
  for (const auto& g : grads)
    for (float v : g.values()) sum += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sum);
}

/// Rescales all gradients by max_norm / g when the global norm g exceeds
/// max_norm. Returns the norm before clipping.
inline double clip_gradients(Gradients& grads, double max_norm) {
  for (const auto& g : grads)
    for (float v : g.values())
      if (!std::isfinite(v)) throw Error(ErrorCode::non_finite_gradient, "gradient contains NaN or Inf");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (float& v : g.values()) v = static_cast<float>(static_cast<double>(v) * scale);
  }
  return norm;
}

/// Coupled L2 decay: g <- g + lambda * theta.
inline void add_weight_decay(Gradients& grads, const Model& model, double lambda) {
  if (lambda == 0.0) return;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& theta = params[i].value;
    auto& g = grads[i];
    for (std::size_t j = 0; j < g.numel(); ++j)
      g[j] = static_cast<float>(static_cast<double>(g[j]) + lambda * static_cast<double>(theta[j]));
  }
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_model(const Model& model) {
    AdamState s;
    for (const auto& p : model.parameters()) {
      s.m.emplace_back(p.value.shape(), 0.0f);
      s.v.emplace_back(p.value.shape(), 0.0f);
    }
    return s;
  }
};

/// Bias-corrected Adam update of every model parameter.
inline void adam_step(Model& model, const Gradients& grads, AdamState& state, const AdamConfig& cfg) {
  auto& params = model.parameters();
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw Error(ErrorCode::shape_mismatch, "gradient/optimizer state count does not match the model");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].value;
    const auto& g = grads[i];
    if (g.shape() != theta.shape() || state.m[i].shape() != theta.shape())
      throw Error(ErrorCode::shape_mismatch, "gradient shape mismatch for " + params[i].name);
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = cfg.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + cfg.epsilon);
      theta[j] = static_cast<float>(static_cast<double>(theta[j]) - update);
    }
  }
}

}  // namespace tfm
