#pragma once
/**
 * @file boundary.hpp
 * @brief Boundary conditions, constraint padding and boundary penalties.
 *
 * Edges follow the grid layout: top is row 0, bottom is row H-1, left is
 * column 0, right is column W-1. Neumann values are outward normal
 * derivatives. On the annulus rows run along the radius (row 0 at the inner
 * radius) and columns along the angle.
 */

#include <array>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "picnn/tensor.hpp"

namespace picnn {

enum class Edge { top = 0, bottom = 1, left = 2, right = 3 };
enum class BcKind { dirichlet, neumann, periodic };
enum class ConstraintMode { soft, hard, combined };
enum class UnaryOp { abs, square, identity };

std::string_view to_string(ConstraintMode mode);
ConstraintMode constraint_mode_from_string(std::string_view name);
std::string_view to_string(UnaryOp op);
UnaryOp unary_op_from_string(std::string_view name);

Tensor apply_unary(const Tensor& x, UnaryOp op);

struct EdgeCondition {
  BcKind kind = BcKind::dirichlet;
  std::vector<double> values;  // one per edge node; empty for periodic

  static EdgeCondition dirichlet(std::vector<double> v) { return {BcKind::dirichlet, std::move(v)}; }
  static EdgeCondition neumann(std::vector<double> v) { return {BcKind::neumann, std::move(v)}; }
  static EdgeCondition periodic() { return {BcKind::periodic, {}}; }
};

struct GridGeometry {
  enum class Kind { cartesian, polar_annulus } kind = Kind::cartesian;
  double hx = 1.0;  // spacing along columns (x, or angle on the annulus)
  double hy = 1.0;  // spacing along rows (y, or radius on the annulus)
  double r_inner = 0.0, r_outer = 0.0;

  static GridGeometry cartesian(double hx, double hy) { return {Kind::cartesian, hx, hy, 0, 0}; }
  /// Rows span [r_inner, r_outer] inclusive; columns cover the full circle.
  static GridGeometry annulus(double r_inner, double r_outer, std::size_t h, std::size_t w);
};

struct BoundarySpec {
  std::array<EdgeCondition, 4> edges;
  GridGeometry geometry;

  const EdgeCondition& edge(Edge e) const { return edges[static_cast<int>(e)]; }
  EdgeCondition& edge(Edge e) { return edges[static_cast<int>(e)]; }

  /// Throws ConfigError on unpaired periodic edges or value lengths that do
  /// not match an H x W grid.
  void validate(std::size_t h, std::size_t w) const;
};

void to_json(nlohmann::json& j, const BoundarySpec& bc);
void from_json(const nlohmann::json& j, BoundarySpec& bc);

/// Pads [N,1,H,W] by `halo` cells per side, enforcing the conditions:
/// Dirichlet edge nodes are overwritten with their values and ghosts are odd
/// reflections about them; Neumann ghosts satisfy the central difference
/// with the prescribed flux; periodic edges wrap. Result is [N,1,H+2h,W+2h].
Tensor apply_hard_constraint(const Tensor& field, const BoundarySpec& bc, std::size_t halo);

/// Pads without constraining: periodic edges wrap, other ghosts are zero.
Tensor pad_soft(const Tensor& field, const BoundarySpec& bc, std::size_t halo);

/// The unpadded H x W window of a padded field.
Tensor crop_halo(const Tensor& padded, std::size_t halo);

/// 0/1 mask [1,1,H,W] of residual points. Dirichlet edge nodes never count.
/// Under soft constraints points whose `halo`-wide support reaches a
/// non-periodic ghost cell are excluded as well.
Tensor residual_mask(const BoundarySpec& bc, ConstraintMode mode, std::size_t h, std::size_t w,
                     std::size_t halo);

/// Mean of unary(mismatch) over every Dirichlet and Neumann edge node of every
/// sample. Neumann mismatches use one-sided differences. Periodic edges add
/// nothing; with no such edges the result is 0.
Tensor boundary_penalty(const Tensor& pred, const BoundarySpec& bc, UnaryOp unary);

}  // namespace picnn
