#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"

namespace flowcount::nn {

enum class OptimizerKind { adam, rmsprop };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  std::int64_t step_count = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;    // adam
  double beta2 = 0.999;  // adam
  double decay = 0.9;    // rmsprop
  double eps = 1e-8;
  std::vector<double> m;  // first moment (adam only)
  std::vector<double> v;  // second moment / running mean square

  static OptimizerState adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                             double eps = 1e-8) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }

  static OptimizerState rmsprop(std::size_t n, double lr, double decay = 0.9, double eps = 1e-8) {
    OptimizerState s;
    s.kind = OptimizerKind::rmsprop;
    s.learning_rate = lr;
    s.decay = decay;
    s.eps = eps;
    s.v.assign(n, 0.0);
    return s;
  }

  [[nodiscard]] std::size_t size() const { return v.size(); }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One in-place update. Adam uses bias-corrected moments with eps added
/// outside the square root; RMSProp keeps eps inside it. Non-finite
/// gradients throw before anything is modified.
template <class T>
void optimizer_step(OptimizerState& s, std::span<T> params, std::span<const T> grads) {
  if (params.size() != grads.size() || params.size() != s.size())
    throw ShapeError("optimizer sizes disagree: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, state " + std::to_string(s.size()));
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(static_cast<double>(grads[i])))
      throw NumericError("non-finite gradient at parameter " + std::to_string(i));
  ++s.step_count;
  const double lr = s.learning_rate;
  if (s.kind == OptimizerKind::adam) {
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step_count));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
      s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
      const double mh = s.m[i] / c1;
      const double vh = s.v[i] / c2;
      params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mh / (std::sqrt(vh) + s.eps));
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      s.v[i] = s.decay * s.v[i] + (1.0 - s.decay) * g * g;
      params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * g / std::sqrt(s.v[i] + s.eps));
    }
  }
}

template <class T>
void optimizer_step(OptimizerState& s, std::vector<T>& params, const std::vector<T>& grads) {
  optimizer_step<T>(s, std::span<T>(params), std::span<const T>(grads));
}

}  // namespace flowcount::nn
