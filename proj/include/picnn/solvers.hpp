#pragma once
/**
 * @file solvers.hpp
 * @brief Reference finite-difference / finite-volume solvers for generated datasets.
 */

#include <cstddef>
#include <vector>

#include <Eigen/Sparse>

#include "picnn/boundary.hpp"
#include "picnn/tensor.hpp"

namespace picnn {

/// Symmetric positive-definite system over the unknown nodes of a grid.
struct SparseSystem {
  Eigen::SparseMatrix<double> matrix;
  Eigen::VectorXd rhs;
  std::vector<std::ptrdiff_t> unknown_of;  // grid node -> unknown index, -1 for fixed nodes
  std::vector<double> fixed;               // grid values of fixed nodes (0 elsewhere)
  std::size_t h = 0, w = 0;

  /// Full H x W field from a vector of unknowns.
  Tensor scatter(const Eigen::VectorXd& x) const;
};

struct CgResult {
  Eigen::VectorXd x;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
};

/// Jacobi-preconditioned conjugate gradient to ||r|| / ||b|| < tol.
/// max_iterations = 0 selects 50 * number of grid nodes.
/// Throws SolverError when the tolerance is not reached.
CgResult solve_cg(const SparseSystem& system, double tol = 1e-10, std::size_t max_iterations = 0);

/// 5-point discretization of u_xx + u_yy + f = 0 with Dirichlet data on all
/// four edges (corner nodes take the precedence of apply_hard_constraint).
SparseSystem assemble_poisson(const Tensor& f, const BoundarySpec& bc);
Tensor solve_poisson_fd(const Tensor& f, const BoundarySpec& bc, double tol = 1e-10);

/// Conservative 5-point finite-volume discretization of -div(K grad u) = 0
/// with Dirichlet left/right edges and zero-flux top/bottom edges. Face
/// permeabilities are harmonic means of the adjacent nodes; nodes on the
/// zero-flux edges own half cells.
SparseSystem assemble_darcy(const Tensor& K, const BoundarySpec& bc);
Tensor solve_darcy_fv(const Tensor& K, const BoundarySpec& bc, double tol = 1e-10);

/// Harmonic mean used for Darcy face permeabilities.
inline double harmonic_mean(double a, double b) { return 2.0 * a * b / (a + b); }

}  // namespace picnn
