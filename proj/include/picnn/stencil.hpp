#pragma once
/**
 * @file stencil.hpp
 * @brief Fixed finite-difference and Sobel kernels for spatial derivatives.
 *
 * Axis convention: x runs along columns (W), y along rows (H), both
 * increasing with the index. Kernels are applied by cross-correlation.
 */

#include <string>
#include <string_view>
#include <vector>

#include "picnn/tensor.hpp"

namespace picnn {

enum class KernelFamily { sobel3, sobel5, central2, central4 };
enum class Derivative { dx, dy, dxx, dyy };

std::string_view to_string(KernelFamily family);
KernelFamily kernel_family_from_string(std::string_view name);

/// A non-trainable derivative kernel with its grid spacing folded in.
struct StencilKernel {
  KernelFamily family = KernelFamily::central2;
  Derivative derivative = Derivative::dx;
  std::size_t rows = 0, cols = 0;
  std::vector<double> coefficients;  // row-major, rows x cols, already divided by h or h^2
  double h = 1.0;

  std::size_t radius_y() const { return rows / 2; }
  std::size_t radius_x() const { return cols / 2; }
  std::size_t radius() const { return std::max(radius_y(), radius_x()); }
  /// Weight tensor [1,1,rows,cols] (never requires grad).
  Tensor weight() const;
  /// The same kernel zero-embedded in a square (2r+1)x(2r+1) window.
  StencilKernel embedded(std::size_t r) const;
};

/// Builds a kernel. Second derivatives of Sobel families are always the
/// composition of two first-derivative passes; `composed` requests the same
/// construction for the central families.
StencilKernel make_stencil(KernelFamily family, Derivative derivative, double h,
                           bool composed = false);

/// Valid cross-correlation re-embedded into an [N,1,H,W] output; positions
/// whose support leaves the field are zero. Differentiable w.r.t. the field.
Tensor apply_stencil(const Tensor& field, const StencilKernel& kernel);

/// 0/1 mask [1,1,H,W] of the positions apply_stencil computes.
Tensor stencil_valid_mask(std::size_t h, std::size_t w, const StencilKernel& kernel);

/// Applies a kernel to a field padded by `halo` cells on every side,
/// returning the [N,1,H,W] result over the unpadded grid.
Tensor apply_stencil_padded(const Tensor& padded, const StencilKernel& kernel, std::size_t halo);

}  // namespace picnn
