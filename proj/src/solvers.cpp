#include "picnn/solvers.hpp"

#include <Eigen/IterativeLinearSolvers>

#include "picnn/error.hpp"

namespace picnn {

namespace {

using Triplet = Eigen::Triplet<double>;

void check_grid(const Tensor& t, const char* who) {
  if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 1) {
    throw ShapeError(std::string(who) + ": expected a [1,1,H,W] field, got " + shape_str(t.shape()));
  }
}

// Marks Dirichlet nodes and stores their values with the hard-constraint precedence.
SparseSystem fixed_layout(const BoundarySpec& bc, std::size_t h, std::size_t w) {
  SparseSystem sys;
  sys.h = h;
  sys.w = w;
  const Tensor mask = residual_mask(bc, ConstraintMode::hard, h, w, 0);
  const Tensor values = apply_hard_constraint(Tensor::zeros({1, 1, h, w}), bc, 0);
  sys.unknown_of.assign(h * w, -1);
  sys.fixed.assign(h * w, 0.0);
  std::ptrdiff_t n = 0;
  for (std::size_t p = 0; p < h * w; ++p) {
    if (mask.at(p) > 0.0) sys.unknown_of[p] = n++;
    else sys.fixed[p] = values.at(p);
  }
  sys.rhs = Eigen::VectorXd::Zero(n);
  return sys;
}

}  // namespace

Tensor SparseSystem::scatter(const Eigen::VectorXd& x) const {
  std::vector<double> out(fixed);
  for (std::size_t p = 0; p < out.size(); ++p)
    if (unknown_of[p] >= 0) out[p] = x(unknown_of[p]);
  return Tensor::from({1, 1, h, w}, std::move(out));
}

CgResult solve_cg(const SparseSystem& system, double tol, std::size_t max_iterations) {
  if (max_iterations == 0) max_iterations = 50 * system.h * system.w;
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                           Eigen::DiagonalPreconditioner<double>>
      cg;
  cg.setTolerance(tol);
  cg.setMaxIterations(static_cast<Eigen::Index>(max_iterations));
  cg.compute(system.matrix);
  if (cg.info() != Eigen::Success) throw SolverError("conjugate gradient: matrix factorization failed");
  CgResult result;
  result.x = cg.solve(system.rhs);
  result.iterations = static_cast<std::size_t>(cg.iterations());
  result.relative_residual = cg.error();
  if (cg.info() != Eigen::Success) {
    throw SolverError("conjugate gradient did not reach tolerance " + std::to_string(tol) + " within " +
                      std::to_string(max_iterations) + " iterations (relative residual " +
                      std::to_string(result.relative_residual) + ")");
  }
  return result;
}

SparseSystem assemble_poisson(const Tensor& f, const BoundarySpec& bc) {
  check_grid(f, "assemble_poisson");
  const std::size_t h = f.dim(2), w = f.dim(3);
  for (const auto& e : bc.edges)
    if (e.kind != BcKind::dirichlet) throw ConfigError("assemble_poisson: all edges must be Dirichlet");
  SparseSystem sys = fixed_layout(bc, h, w);
  const double cx = 1.0 / (bc.geometry.hx * bc.geometry.hx), cy = 1.0 / (bc.geometry.hy * bc.geometry.hy);
  std::vector<Triplet> triplets;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::ptrdiff_t row = sys.unknown_of[i * w + j];
      if (row < 0) continue;
      triplets.emplace_back(row, row, 2.0 * cx + 2.0 * cy);
      sys.rhs(row) += f.at(i * w + j);
      auto link = [&](std::size_t q, double c) {
        if (sys.unknown_of[q] >= 0) triplets.emplace_back(row, sys.unknown_of[q], -c);
        else sys.rhs(row) += c * sys.fixed[q];
      };
      link(i * w + j - 1, cx);
      link(i * w + j + 1, cx);
      link((i - 1) * w + j, cy);
      link((i + 1) * w + j, cy);
    }
  const auto n = sys.rhs.size();
  sys.matrix.resize(n, n);
  sys.matrix.setFromTriplets(triplets.begin(), triplets.end());
  return sys;
}

Tensor solve_poisson_fd(const Tensor& f, const BoundarySpec& bc, double tol) {
  const SparseSystem sys = assemble_poisson(f, bc);
  return sys.scatter(solve_cg(sys, tol).x);
}

SparseSystem assemble_darcy(const Tensor& K, const BoundarySpec& bc) {
  check_grid(K, "assemble_darcy");
  const std::size_t h = K.dim(2), w = K.dim(3);
  if (bc.edge(Edge::left).kind != BcKind::dirichlet || bc.edge(Edge::right).kind != BcKind::dirichlet) {
    throw ConfigError("assemble_darcy: left and right edges must be Dirichlet");
  }
  for (Edge e : {Edge::top, Edge::bottom}) {
    const auto& c = bc.edge(e);
    if (c.kind != BcKind::neumann) throw ConfigError("assemble_darcy: top and bottom edges must be zero-flux");
    for (double g : c.values)
      if (g != 0.0) throw ConfigError("assemble_darcy: only zero flux is supported on top and bottom edges");
  }
  for (double k : K.data())
    if (!(k > 0.0)) throw std::domain_error("assemble_darcy: permeability must be positive");

  SparseSystem sys = fixed_layout(bc, h, w);
  const double hx = bc.geometry.hx, hy = bc.geometry.hy;
  std::vector<Triplet> triplets;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t p = i * w + j;
      const std::ptrdiff_t row = sys.unknown_of[p];
      if (row < 0) continue;
      const double height = (i == 0 || i == h - 1) ? 0.5 * hy : hy;
      double diag = 0.0;
      auto link = [&](std::size_t q, double t) {
        diag += t;
        if (sys.unknown_of[q] >= 0) triplets.emplace_back(row, sys.unknown_of[q], -t);
        else sys.rhs(row) += t * sys.fixed[q];
      };
      link(p - 1, harmonic_mean(K.at(p), K.at(p - 1)) * height / hx);
      link(p + 1, harmonic_mean(K.at(p), K.at(p + 1)) * height / hx);
      if (i > 0) link(p - w, harmonic_mean(K.at(p), K.at(p - w)) * hx / hy);
      if (i + 1 < h) link(p + w, harmonic_mean(K.at(p), K.at(p + w)) * hx / hy);
      triplets.emplace_back(row, row, diag);
    }
  const auto n = sys.rhs.size();
  sys.matrix.resize(n, n);
  sys.matrix.setFromTriplets(triplets.begin(), triplets.end());
  return sys;
}

Tensor solve_darcy_fv(const Tensor& K, const BoundarySpec& bc, double tol) {
  const SparseSystem sys = assemble_darcy(K, bc);
  return sys.scatter(solve_cg(sys, tol).x);
}

}  // namespace picnn
