#include "picnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "picnn/error.hpp"

namespace picnn {

namespace {

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> data(picnn::numel(shape), value);
  return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(new_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return full(Shape{1}, value); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_str(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  ensure_grad();
  return impl_->grad;
}

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data)); }

Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(new_impl(std::move(shape), std::move(data)));
  if (!t_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<TapeNode>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const double> values) {
  if (!t.requires_grad()) return;
  auto& grad = t.impl()->grad;
  if (grad.empty()) grad.assign(t.numel(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += values[i];
}

std::size_t backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward() requires a scalar root, got shape " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) return 0;

  // Collect every recorded node reachable from the root.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{root.impl()};
  while (!stack.empty()) {
    TensorImpl* cur = stack.back();
    stack.pop_back();
    if (!cur->node || !seen.insert(cur).second) continue;
    order.push_back(cur);
    for (const Tensor& in : cur->node->inputs) {
      if (in.requires_grad()) stack.push_back(in.impl());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl* a, const TensorImpl* b) { return a->seq > b->seq; });

  // Interior gradients are per-sweep scratch; leaves accumulate across sweeps.
  for (TensorImpl* impl : order) impl->grad.assign(impl->data.size(), 0.0);
  auto& root_grad = root.impl()->grad;
  if (root_grad.empty()) root_grad.assign(1, 0.0);
  root_grad[0] += 1.0;

  for (TensorImpl* impl : order) impl->node->backward(impl->grad);
  return order.size();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace picnn
