#pragma once
/**
 * @file tensor.hpp
 * @brief Dense row-major tensors of doubles with a reverse-mode gradient tape.
 *
 * A Tensor is a shared handle. Operations that consume tensors with
 * requires_grad() record a TapeNode on their output; backward() walks the
 * recorded nodes from a scalar root in reverse creation order and accumulates
 * gradients into every leaf that requires them.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace picnn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TensorImpl;

/// Receives the gradient of the node's output and accumulates into its inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeNode {
  std::string_view op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;
  std::uint64_t seq = 0;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  /// Marks a leaf as trainable. Throws if called on a non-leaf.
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Allocates a zero gradient buffer if none exists.
  void ensure_grad();
  /// Drops the gradient buffer; has_grad() becomes false.
  void clear_grad();

  /// New leaf with a copy of the data and no tape history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<double>, std::string_view,
                            std::vector<Tensor>, BackwardFn);
};

/// Builds an op output; records a tape node when grad mode is on and any
/// input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Adds `values` into the gradient of `t` (no-op unless t requires grad).
void accumulate_grad(const Tensor& t, std::span<const double> values);

/// Reverse-mode sweep from a scalar root. Returns the number of tape nodes
/// whose backward function ran (each reachable node exactly once).
std::size_t backward(const Tensor& root);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace picnn
