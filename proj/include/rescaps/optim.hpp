#pragma once

#include <string>
#include <vector>

#include "rescaps/tensor.hpp"

namespace rescaps {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind optimizer_kind_from_string(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step_count = 0;
  // Adam moment buffers, allocated on first step, one per parameter.
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Applies one update to every parameter from its accumulated gradient.
// Gradients are left untouched; the caller zeroes them.
void optimizer_step(std::vector<Tensor>& params, OptimizerState& state);

}  // namespace rescaps
