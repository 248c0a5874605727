#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dvd/tensor.hpp"

namespace dvd {

enum class OptimizerKind { SgdMomentum, AdamW };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 3e-4;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  // Allocated on the first step, one buffer per parameter.
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static OptimizerState sgd(double lr, double momentum = 0.0, double weight_decay = 0.0);
  static OptimizerState adamw(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8);
};

/// Applies one update to `params` in place. `grads[i]` belongs to
/// `params[i]`. SGD uses coupled weight decay and a PyTorch-style momentum
/// buffer; AdamW decays weights by lr*wd before the bias-corrected step.
void optimizer_step(OptimizerState& state, const ParamList& params, std::span<const Tensor> grads);

/// Same, reading each parameter's accumulated `.grad` (absent means zero).
void optimizer_step(OptimizerState& state, const ParamList& params);

void zero_grads(const ParamList& params);

}  // namespace dvd
