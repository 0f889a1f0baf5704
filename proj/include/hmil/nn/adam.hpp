#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hmil/error.hpp"
#include "hmil/nn/tensor.hpp"
#include "hmil/rng.hpp"

namespace hmil::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: params and grads differ in count");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match params");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    p.require_same_shape(g, "adam_step");
    p.require_same_shape(state.m[k], "adam_step state");
    auto pd = p.data();
    auto gd = g.data();
    auto md = state.m[k].data();
    auto vd = state.v[k].data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
      vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double mhat = md[i] / c1;
      const double vhat = vd[i] / c2;
      pd[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

/// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(fan_in, fan_out);
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

}  // namespace hmil::nn
