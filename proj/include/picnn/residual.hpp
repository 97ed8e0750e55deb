#pragma once
/**
 * @file residual.hpp
 * @brief PDE residual fields for the Laplace/heat, Poisson and Darcy operators.
 */

#include <string_view>
#include <utility>

#include "picnn/boundary.hpp"
#include "picnn/stencil.hpp"

namespace picnn {

enum class PdeKind {
  heat_annulus,  // Laplace equation in polar coordinates
  poisson,       // u_xx + u_yy + f = 0, input field is f
  darcy,         // -div(K grad u) = 0, input field is K
};

std::string_view to_string(PdeKind kind);
PdeKind pde_kind_from_string(std::string_view name);

/// First and second derivative kernels of one family on a given grid.
struct StencilSet {
  StencilKernel dx, dy, dxx, dyy;

  static StencilSet make(KernelFamily family, const GridGeometry& geometry, bool composed = false);
  /// Radius of a single first-derivative pass.
  std::size_t first_radius() const { return std::max(dx.radius(), dy.radius()); }
  std::size_t second_radius() const { return std::max(dxx.radius(), dyy.radius()); }
};

/// Halo the operator needs around an H x W field.
std::size_t operator_halo(PdeKind kind, const StencilSet& stencils);

/// u_xx + u_yy (cartesian) or u_rr + u_r/rho + u_tt/rho^2 (annulus, rows are
/// the radius) over the unpadded grid of a field padded by `halo`.
Tensor laplacian(const Tensor& padded, std::size_t halo, const StencilSet& stencils,
                 const GridGeometry& geometry);

/// -div(K grad u) computed as two first-derivative passes with K multiplied in
/// between. `u_padded` carries `halo` >= 2 * first_radius ghost cells; K is the
/// unpadded [N,1,H,W] coefficient, extended by edge replication.
/// Throws ShapeError on mismatched shapes and std::domain_error if K <= 0.
Tensor darcy_residual(const Tensor& u_padded, std::size_t halo, const Tensor& K,
                      const StencilSet& stencils);

/// Stencil gradient (x, y) of a residual field; both re-embedded like apply_stencil.
std::pair<Tensor, Tensor> residual_gradient(const Tensor& residual, const StencilSet& stencils);

struct ResidualEvaluation {
  Tensor field;     // prediction after constraint, [N,1,H,W]
  Tensor residual;  // [N,1,H,W]
  Tensor mask;      // [1,1,H,W], 1 where the residual counts
};

/// Applies the constraint mode to a network output and evaluates the
/// operator. `input` is the source term (poisson) or K (darcy) and is ignored
/// for heat_annulus.
ResidualEvaluation evaluate_residual(PdeKind kind, const Tensor& output, const Tensor& input,
                                     const BoundarySpec& bc, const StencilSet& stencils,
                                     ConstraintMode mode);

}  // namespace picnn
