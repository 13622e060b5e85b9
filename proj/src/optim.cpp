#include "rescaps/optim.hpp"

#include <cmath>

namespace rescaps {

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer kind '" + name + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

void optimizer_step(std::vector<Tensor>& params, OptimizerState& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw std::runtime_error("optimizer_step: parameter " + std::to_string(i) +
                               " has no gradient");
    }
  }
  state.step_count += 1;
  if (state.kind == OptimizerKind::kSgd) {
    for (auto& p : params) {
      auto& data = p.mutable_data();
      const auto& g = p.grad();
      for (std::size_t j = 0; j < data.size(); ++j)
        data[j] -= state.learning_rate * g[j];
    }
    return;
  }
  // Adam with bias correction.
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].mutable_data();
    const auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) {
      m.assign(data.size(), 0.0);
      v.assign(data.size(), 0.0);
    } else if (m.size() != data.size()) {
      throw ShapeError("optimizer_step: moment buffer for parameter " +
                       std::to_string(i) + " has size " +
                       std::to_string(m.size()) + ", parameter has " +
                       std::to_string(data.size()));
    }
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      double m_hat = m[j] / bc1;
      double v_hat = v[j] / bc2;
      data[j] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

}  // namespace rescaps
