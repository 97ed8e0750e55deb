#pragma once
/**
 * @file ops.hpp
 * @brief Differentiable tensor operations.
 *
 * Binary elementwise ops require equal shapes, except that either operand may
 * be a single-element tensor, which is broadcast. No other broadcasting exists.
 * Image ops use NCHW layout.
 */

#include <cstdint>
#include <optional>
#include <vector>

#include "picnn/tensor.hpp"

namespace picnn {

enum class PadMode { zeros, circular };

/// Per-side padding amounts with an independent mode for each spatial axis.
struct PaddingSpec {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
  PadMode rows = PadMode::zeros;  // padding along H
  PadMode cols = PadMode::zeros;  // padding along W

  static PaddingSpec none() { return {}; }
  /// Symmetric padding that preserves H and W for an odd kernel at stride 1.
  static PaddingSpec same(std::size_t kernel, PadMode cols_mode = PadMode::zeros,
                          PadMode rows_mode = PadMode::zeros) {
    const std::size_t p = kernel / 2;
    return {p, p, p, p, rows_mode, cols_mode};
  }
};

enum class UpsampleMode { bilinear, nearest };

// elementwise algebra
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws std::domain_error if any divisor element is zero.
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor pow2(const Tensor& a);
/// Subgradient 0 at 0.
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact form x * Phi(x) with Phi the standard normal CDF.
Tensor gelu(const Tensor& a);

// reductions (scalar outputs of shape [1])
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Gradient flows to the first maximal element in row-major order.
Tensor max_reduce(const Tensor& a);

// shape and indexing
Tensor reshape(const Tensor& a, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);
/// Columns [begin, end) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Row `row` of a 2-D tensor, returned with shape [1, cols].
Tensor select_row(const Tensor& a, std::size_t row);
/// Element `index` (flat) as a scalar tensor.
Tensor select(const Tensor& a, std::size_t index);
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_batch(const Tensor& a, std::size_t index);
Tensor stack_batch(const std::vector<Tensor>& items);

/// One output element of a gather_affine plan: out = scale * in[source] + offset,
/// or just offset when source < 0.
struct AffineGather {
  std::int64_t source = -1;
  double scale = 0.0;
  double offset = 0.0;
};

/// General differentiable re-indexing used for padding and boundary filling.
Tensor gather_affine(const Tensor& a, Shape out_shape, std::vector<AffineGather> plan);

// image ops
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              std::size_t stride = 1, const PaddingSpec& padding = {});
/// One kh x kw filter per channel; weight shape [C,1,kh,kw].
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight,
                        const std::optional<Tensor>& bias, std::size_t stride = 1,
                        const PaddingSpec& padding = {});
Tensor depthwise_separable_conv2d(const Tensor& input, const Tensor& depthwise_weight,
                                  const Tensor& pointwise_weight,
                                  const std::optional<Tensor>& bias, std::size_t stride = 1,
                                  const PaddingSpec& padding = {});
/// Zero-mode padding cells never win the max.
Tensor maxpool2d(const Tensor& input, std::size_t size, std::size_t stride,
                 const PaddingSpec& padding = {});
/// Averages over the non-padding cells of each window.
Tensor avgpool2d(const Tensor& input, std::size_t size, std::size_t stride,
                 const PaddingSpec& padding = {});
/// Integer-factor resize; bilinear uses the align-corners convention.
Tensor upsample(const Tensor& input, UpsampleMode mode, std::size_t scale);
Tensor upsample_to(const Tensor& input, UpsampleMode mode, std::size_t out_h,
                   std::size_t out_w);
Tensor group_norm(const Tensor& input, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

}  // namespace picnn
