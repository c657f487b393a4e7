#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "iternet/param_store.hpp"

namespace iternet {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("adam: betas must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
  }
};

/// One bias-corrected Adam update over every entry; gradients are zeroed
/// afterwards and cfg.step advances by one.
template <typename T>
void adam_step(ParamStore<T>& store, OptimizerConfig& cfg) {
  cfg.validate();
  cfg.step += 1;
  const double t = static_cast<double>(cfg.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [_, e] : store.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double m = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
      e.m[i] = static_cast<T>(m);
      e.v[i] = static_cast<T>(v);
      const double update = cfg.learning_rate * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
      e.value[i] = static_cast<T>(e.value[i] - update);
    }
    e.grad.fill(T{0});
  }
}

}  // namespace iternet
