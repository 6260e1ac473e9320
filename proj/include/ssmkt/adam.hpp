#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssmkt/tensor.hpp"

namespace ssmkt {

// Bias-corrected Adam over a fixed parameter list. Moments live here and
// start at zero; `step` counts applied updates.
template <typename S>
struct AdamState {
  std::vector<std::vector<S>> m, v;
  i64 step = 0;

  explicit AdamState(const std::vector<Param<S>*>& params) {
    for (const Param<S>* p : params) {
      m.emplace_back(static_cast<std::size_t>(p->value.numel()), S(0));
      v.emplace_back(static_cast<std::size_t>(p->value.numel()), S(0));
    }
  }
};

// Scales all gradients in place so the global L2 norm is at most max_norm.
template <typename S>
double clip_global_norm(std::vector<std::vector<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (S x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return norm;
  const S scale = S(max_norm / norm);
  for (auto& g : grads)
    for (S& x : g) x *= scale;
  return norm;
}

// One in-place update. A NaN gradient aborts the step with a diagnostic
// naming the parameter; nothing is modified in that case.
template <typename S>
void adam_step(const std::vector<Param<S>*>& params, const std::vector<std::vector<S>>& grads,
               double lr, AdamState<S>& state, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: params/grads length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->trainable) continue;
    for (S g : grads[i])
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adam_step: non-finite gradient in parameter '" + params[i]->name +
                           "'; step aborted");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->trainable) continue;
    auto& val = *params[i]->value.data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      m[j] = S(beta1) * m[j] + S(1.0 - beta1) * g[j];
      v[j] = S(beta2) * v[j] + S(1.0 - beta2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      val[j] -= S(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

}  // namespace ssmkt
