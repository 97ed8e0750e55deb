#pragma once

#include <functional>
#include <vector>

#include "picnn/tensor.hpp"

namespace picnn {

struct GradcheckReport {
  /// Per input: max |analytic - numeric| over elements divided by the larger
  /// of the two gradients' max magnitudes.
  std::vector<double> max_rel_error;
  double worst() const;
};

using TensorFunction = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of a scalar function with central
/// differences of step h. Inputs are perturbed in place and restored.
GradcheckReport gradcheck(const TensorFunction& f, std::vector<Tensor> inputs, double h = 1e-5);

}  // namespace picnn
