#include "picnn/optim.hpp"

#include <cmath>

#include "picnn/error.hpp"

namespace picnn {

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.empty() && state.v.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                     " parameters but " + std::to_string(params.size()) + " were given");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i) +
                       " with shape " + shape_str(params[i].shape()));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto d = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < d.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      d[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
    }
  }
}

void sgd_step(std::span<Tensor> params, double lr, double direction) {
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto d = p.mutable_data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += direction * lr * g[j];
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.clear_grad();
}

}  // namespace picnn
