#include "picnn/residual.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"

namespace picnn {

namespace {

// Constant [N,1,H,W] tensor whose value depends only on the row.
Tensor row_profile(std::size_t n, std::size_t h, std::size_t w, const std::vector<double>& per_row) {
  std::vector<double> data(n * h * w);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h; ++i)
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>((s * h + i) * w), w, per_row[i]);
  return Tensor::from({n, 1, h, w}, std::move(data));
}

// Edge-replicated copy of K with `r` extra cells per side.
Tensor replicate_pad(const Tensor& K, std::size_t r) {
  const std::size_t n = K.dim(0), h = K.dim(2), w = K.dim(3);
  const std::size_t ph = h + 2 * r, pw = w + 2 * r;
  std::vector<AffineGather> plan(n * ph * pw);
  const auto ri = static_cast<std::int64_t>(r);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j) {
        const auto si = std::clamp<std::int64_t>(static_cast<std::int64_t>(i) - ri, 0, static_cast<std::int64_t>(h) - 1);
        const auto sj = std::clamp<std::int64_t>(static_cast<std::int64_t>(j) - ri, 0, static_cast<std::int64_t>(w) - 1);
        plan[(s * ph + i) * pw + j] = {static_cast<std::int64_t>(s * h * w) + si * static_cast<std::int64_t>(w) + sj, 1.0, 0.0};
      }
  return gather_affine(K, {n, 1, ph, pw}, std::move(plan));
}

}  // namespace

std::string_view to_string(PdeKind kind) {
  switch (kind) {
    case PdeKind::heat_annulus: return "heat_annulus";
    case PdeKind::poisson: return "poisson";
    case PdeKind::darcy: return "darcy";
  }
  return "?";
}

PdeKind pde_kind_from_string(std::string_view name) {
  for (auto k : {PdeKind::heat_annulus, PdeKind::poisson, PdeKind::darcy})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown problem '" + std::string(name) + "'");
}

StencilSet StencilSet::make(KernelFamily family, const GridGeometry& geometry, bool composed) {
  return {make_stencil(family, Derivative::dx, geometry.hx),
          make_stencil(family, Derivative::dy, geometry.hy),
          make_stencil(family, Derivative::dxx, geometry.hx, composed),
          make_stencil(family, Derivative::dyy, geometry.hy, composed)};
}

std::size_t operator_halo(PdeKind kind, const StencilSet& stencils) {
  if (kind == PdeKind::darcy) return 2 * stencils.first_radius();
  return std::max(stencils.second_radius(), stencils.first_radius());
}

Tensor laplacian(const Tensor& padded, std::size_t halo, const StencilSet& stencils,
                 const GridGeometry& geometry) {
  if (halo < stencils.second_radius()) {
    throw ShapeError("laplacian: halo " + std::to_string(halo) + " smaller than stencil radius");
  }
  Tensor uxx = apply_stencil_padded(padded, stencils.dxx, halo);
  Tensor uyy = apply_stencil_padded(padded, stencils.dyy, halo);
  if (geometry.kind == GridGeometry::Kind::cartesian) return add(uxx, uyy);

  const std::size_t n = uxx.dim(0), h = uxx.dim(2), w = uxx.dim(3);
  const double expected_hy = (geometry.r_outer - geometry.r_inner) / static_cast<double>(h - 1);
  if (h < 2 || std::abs(expected_hy - geometry.hy) > 1e-12 * geometry.r_outer) {
    throw ShapeError("laplacian: annulus geometry does not match a grid with " + std::to_string(h) + " rows");
  }
  std::vector<double> inv_rho(h), inv_rho2(h);
  for (std::size_t i = 0; i < h; ++i) {
    const double rho = geometry.r_inner + static_cast<double>(i) * geometry.hy;
    inv_rho[i] = 1.0 / rho;
    inv_rho2[i] = 1.0 / (rho * rho);
  }
  Tensor ur = apply_stencil_padded(padded, stencils.dy, halo);
  return add(add(uyy, mul(ur, row_profile(n, h, w, inv_rho))), mul(uxx, row_profile(n, h, w, inv_rho2)));
}

Tensor darcy_residual(const Tensor& u_padded, std::size_t halo, const Tensor& K,
                      const StencilSet& stencils) {
  const std::size_t r = stencils.first_radius();
  if (halo < 2 * r) throw ShapeError("darcy_residual: halo must cover two derivative passes");
  if (u_padded.ndim() != 4 || K.ndim() != 4 || u_padded.dim(0) != K.dim(0) || K.dim(1) != 1 ||
      u_padded.dim(2) != K.dim(2) + 2 * halo || u_padded.dim(3) != K.dim(3) + 2 * halo) {
    throw ShapeError("darcy_residual: u " + shape_str(u_padded.shape()) + " (halo " +
                     std::to_string(halo) + ") does not match K " + shape_str(K.shape()));
  }
  for (double k : K.data())
    if (!(k > 0.0)) throw std::domain_error("darcy_residual: permeability must be positive");

  Tensor u = u_padded;
  if (halo > 2 * r) {
    // trim the surplus ring so both passes use the same window
    u = crop_halo(u_padded, halo - 2 * r);
  }
  const auto ex = stencils.dx.embedded(r), ey = stencils.dy.embedded(r);
  Tensor kp = replicate_pad(K, r);
  Tensor flux_x = mul(kp, conv2d(u, ex.weight(), std::nullopt));
  Tensor flux_y = mul(kp, conv2d(u, ey.weight(), std::nullopt));
  Tensor div = add(conv2d(flux_x, ex.weight(), std::nullopt), conv2d(flux_y, ey.weight(), std::nullopt));
  return neg(div);
}

std::pair<Tensor, Tensor> residual_gradient(const Tensor& residual, const StencilSet& stencils) {
  return {apply_stencil(residual, stencils.dx), apply_stencil(residual, stencils.dy)};
}

ResidualEvaluation evaluate_residual(PdeKind kind, const Tensor& output, const Tensor& input,
                                     const BoundarySpec& bc, const StencilSet& stencils,
                                     ConstraintMode mode) {
  if (output.ndim() != 4 || output.dim(1) != 1) {
    throw ShapeError("evaluate_residual: output must be [N,1,H,W], got " + shape_str(output.shape()));
  }
  const std::size_t h = output.dim(2), w = output.dim(3);
  const std::size_t halo = operator_halo(kind, stencils);
  const bool hard = mode != ConstraintMode::soft;
  Tensor padded = hard ? apply_hard_constraint(output, bc, halo) : pad_soft(output, bc, halo);

  ResidualEvaluation ev;
  ev.field = hard ? crop_halo(padded, halo) : output;
  ev.mask = residual_mask(bc, mode, h, w, halo);
  switch (kind) {
    case PdeKind::heat_annulus:
      ev.residual = laplacian(padded, halo, stencils, bc.geometry);
      break;
    case PdeKind::poisson:
      if (input.shape() != output.shape()) {
        throw ShapeError("evaluate_residual: source " + shape_str(input.shape()) +
                         " does not match output " + shape_str(output.shape()));
      }
      ev.residual = add(laplacian(padded, halo, stencils, bc.geometry), input);
      break;
    case PdeKind::darcy:
      ev.residual = darcy_residual(padded, halo, input, stencils);
      break;
  }
  return ev;
}

}  // namespace picnn
