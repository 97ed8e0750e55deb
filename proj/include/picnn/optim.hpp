#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "picnn/tensor.hpp"

namespace picnn {

/// Moment estimates for one Adam optimizer over an ordered parameter list.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Bias-corrected Adam update using each parameter's accumulated gradient.
/// Moments are allocated on the first call. Parameters without a gradient
/// buffer are left untouched (their moments are not advanced either).
void adam_step(std::span<Tensor> params, AdamState& state);

/// Plain gradient step p += direction * lr * grad; direction is +1 for ascent.
void sgd_step(std::span<Tensor> params, double lr, double direction = -1.0);

void zero_grads(std::span<Tensor> params);

}  // namespace picnn
