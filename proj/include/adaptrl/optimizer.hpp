#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "adaptrl/tensor.hpp"

namespace adaptrl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  ParameterSet first_moment;
  ParameterSet second_moment;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(AdamConfig cfg) : config(cfg) {}
};

/// Adam with bias correction. Only parameters named in `grads` move; their
/// moments are created on first use. The step counter advances once per call.
inline void optimizer_update(ParameterSet& params, const ParameterSet& grads,
                             OptimizerState& state) {
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& w = params.at(name);
    if (w.shape() != g.shape()) {
      throw ShapeError("optimizer: gradient for " + name + " has shape " +
                       shape_string(g.shape()) + ", parameter has " +
                       shape_string(w.shape()));
    }
    if (!state.first_moment.contains(name)) {
      state.first_moment.insert(name, Tensor(w.shape()));
      state.second_moment.insert(name, Tensor(w.shape()));
    }
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      // beta1 = 0 gives correction1 = 1, i.e. plain RMS scaling.
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace adaptrl
