#include "picnn/boundary.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"

namespace picnn {

namespace {

constexpr std::array<std::string_view, 4> kEdgeNames{"top", "bottom", "left", "right"};

std::string_view kind_name(BcKind k) {
  switch (k) {
    case BcKind::dirichlet: return "dirichlet";
    case BcKind::neumann: return "neumann";
    case BcKind::periodic: return "periodic";
  }
  return "?";
}

BcKind kind_from_name(const std::string& s) {
  if (s == "dirichlet") return BcKind::dirichlet;
  if (s == "neumann") return BcKind::neumann;
  if (s == "periodic") return BcKind::periodic;
  throw ConfigError("unknown boundary kind '" + s + "'");
}

struct Affine {
  std::int64_t source = -1;
  double scale = 0.0;
  double offset = 0.0;
};

std::int64_t wrap(std::int64_t i, std::int64_t n) { return ((i % n) + n) % n; }

// Builds the gather plan that maps an H x W grid onto its padded version.
class PadPlanner {
 public:
  PadPlanner(const BoundarySpec& bc, std::size_t h, std::size_t w, bool hard)
      : bc_(bc), h_(static_cast<std::int64_t>(h)), w_(static_cast<std::int64_t>(w)), hard_(hard) {}

  Affine resolve(std::int64_t i, std::int64_t j) const {
    const bool row_out = i < 0 || i >= h_, col_out = j < 0 || j >= w_;
    // at corners, reflect about a Dirichlet edge last so its edge node is a constant
    const bool column_first = row_out && col_out &&
                              bc_.edge(i < 0 ? Edge::top : Edge::bottom).kind == BcKind::dirichlet &&
                              bc_.edge(j < 0 ? Edge::left : Edge::right).kind != BcKind::dirichlet;
    if (row_out && !column_first) {
      const Edge e = i < 0 ? Edge::top : Edge::bottom;
      const auto& c = bc_.edge(e);
      if (c.kind == BcKind::periodic) return resolve(wrap(i, h_), j);
      if (!hard_) return {};
      const std::int64_t k = i < 0 ? -i : i - (h_ - 1);
      const std::int64_t mirror = i < 0 ? k : h_ - 1 - k;
      if (c.kind == BcKind::dirichlet) return reflect_odd(resolve(i < 0 ? 0 : h_ - 1, j), resolve(mirror, j));
      const double g = c.values[static_cast<std::size_t>(std::clamp<std::int64_t>(j, 0, w_ - 1))];
      return extend(resolve(mirror, j), g, k, bc_.geometry.hy);
    }
    if (col_out) {
      const Edge e = j < 0 ? Edge::left : Edge::right;
      const auto& c = bc_.edge(e);
      if (c.kind == BcKind::periodic) return resolve(i, wrap(j, w_));
      if (!hard_) return {};
      const std::int64_t k = j < 0 ? -j : j - (w_ - 1);
      const std::int64_t mirror = j < 0 ? k : w_ - 1 - k;
      if (c.kind == BcKind::dirichlet) return reflect_odd(resolve(i, j < 0 ? 0 : w_ - 1), resolve(i, mirror));
      const double g = c.values[static_cast<std::size_t>(std::clamp<std::int64_t>(i, 0, h_ - 1))];
      return extend(resolve(i, mirror), g, k, bc_.geometry.hx);
    }
    if (hard_) {
      // later edges take precedence at corners
      for (Edge e : {Edge::right, Edge::left, Edge::bottom, Edge::top}) {
        const auto& c = bc_.edge(e);
        if (c.kind != BcKind::dirichlet) continue;
        if (e == Edge::top && i == 0) return {-1, 0.0, c.values[static_cast<std::size_t>(j)]};
        if (e == Edge::bottom && i == h_ - 1) return {-1, 0.0, c.values[static_cast<std::size_t>(j)]};
        if (e == Edge::left && j == 0) return {-1, 0.0, c.values[static_cast<std::size_t>(i)]};
        if (e == Edge::right && j == w_ - 1) return {-1, 0.0, c.values[static_cast<std::size_t>(i)]};
      }
    }
    return {i * w_ + j, 1.0, 0.0};
  }

 private:
  // ghost = 2 * edge - inner; in hard mode the edge node is a constant
  static Affine reflect_odd(Affine edge, Affine inner) {
    if (edge.source >= 0) throw std::logic_error("odd reflection about a free node");
    return {inner.source, -inner.scale, 2.0 * edge.offset - inner.offset};
  }

  // ghost = inner + 2 k h g, the central difference over the edge node equals g
  static Affine extend(Affine inner, double g, std::int64_t k, double spacing) {
    return {inner.source, inner.scale, inner.offset + 2.0 * static_cast<double>(k) * spacing * g};
  }

  const BoundarySpec& bc_;
  std::int64_t h_, w_;
  bool hard_;
};

void check_field(const Tensor& field, const char* who) {
  if (field.ndim() != 4 || field.dim(1) != 1) {
    throw ShapeError(std::string(who) + ": field must be [N,1,H,W], got " + shape_str(field.shape()));
  }
}

Tensor pad_impl(const Tensor& field, const BoundarySpec& bc, std::size_t halo, bool hard,
                const char* who) {
  check_field(field, who);
  const std::size_t n = field.dim(0), h = field.dim(2), w = field.dim(3);
  bc.validate(h, w);
  if (halo >= h || halo >= w) {
    throw ShapeError(std::string(who) + ": halo " + std::to_string(halo) + " too large for " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  const PadPlanner planner(bc, h, w, hard);
  const std::size_t ph = h + 2 * halo, pw = w + 2 * halo;
  std::vector<Affine> grid(ph * pw);
  const auto r = static_cast<std::int64_t>(halo);
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j)
      grid[i * pw + j] = planner.resolve(static_cast<std::int64_t>(i) - r, static_cast<std::int64_t>(j) - r);

  std::vector<AffineGather> plan(n * ph * pw);
  const auto plane = static_cast<std::int64_t>(h * w);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < ph * pw; ++k) {
      const Affine& a = grid[k];
      plan[s * ph * pw + k] = {a.source < 0 ? -1 : a.source + static_cast<std::int64_t>(s) * plane,
                               a.scale, a.offset};
    }
  return gather_affine(field, {n, 1, ph, pw}, std::move(plan));
}

}  // namespace

std::string_view to_string(ConstraintMode mode) {
  switch (mode) {
    case ConstraintMode::soft: return "soft";
    case ConstraintMode::hard: return "hard";
    case ConstraintMode::combined: return "combined";
  }
  return "?";
}

ConstraintMode constraint_mode_from_string(std::string_view name) {
  for (auto m : {ConstraintMode::soft, ConstraintMode::hard, ConstraintMode::combined})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown constraint mode '" + std::string(name) + "'");
}

std::string_view to_string(UnaryOp op) {
  switch (op) {
    case UnaryOp::abs: return "abs";
    case UnaryOp::square: return "square";
    case UnaryOp::identity: return "identity";
  }
  return "?";
}

UnaryOp unary_op_from_string(std::string_view name) {
  for (auto u : {UnaryOp::abs, UnaryOp::square, UnaryOp::identity})
    if (to_string(u) == name) return u;
  throw ConfigError("unknown unary op '" + std::string(name) + "'");
}

Tensor apply_unary(const Tensor& x, UnaryOp op) {
  switch (op) {
    case UnaryOp::abs: return abs(x);
    case UnaryOp::square: return pow2(x);
    case UnaryOp::identity: return x;
  }
  return x;
}

GridGeometry GridGeometry::annulus(double r_inner, double r_outer, std::size_t h, std::size_t w) {
  if (!(r_inner > 0.0) || !(r_outer > r_inner) || h < 2 || w < 1) {
    throw ConfigError("annulus geometry needs 0 < r_inner < r_outer and at least 2 radial rows");
  }
  GridGeometry g;
  g.kind = Kind::polar_annulus;
  g.r_inner = r_inner;
  g.r_outer = r_outer;
  g.hy = (r_outer - r_inner) / static_cast<double>(h - 1);
  g.hx = 2.0 * std::numbers::pi / static_cast<double>(w);
  return g;
}

void BoundarySpec::validate(std::size_t h, std::size_t w) const {
  auto periodic = [&](Edge e) { return edge(e).kind == BcKind::periodic; };
  if (periodic(Edge::top) != periodic(Edge::bottom) || periodic(Edge::left) != periodic(Edge::right)) {
    throw ConfigError("periodic boundary edges must come in opposing pairs");
  }
  for (int e = 0; e < 4; ++e) {
    const auto& c = edges[static_cast<std::size_t>(e)];
    if (c.kind == BcKind::periodic) continue;
    const std::size_t expected = e < 2 ? w : h;
    if (c.values.size() != expected) {
      throw ConfigError("boundary edge '" + std::string(kEdgeNames[static_cast<std::size_t>(e)]) +
                        "' has " + std::to_string(c.values.size()) + " values, grid needs " +
                        std::to_string(expected));
    }
  }
  if (!(geometry.hx > 0.0) || !(geometry.hy > 0.0)) throw ConfigError("grid spacing must be positive");
  if (geometry.kind == GridGeometry::Kind::polar_annulus &&
      !(geometry.r_inner > 0.0 && geometry.r_outer > geometry.r_inner)) {
    throw ConfigError("annulus radii must satisfy 0 < r_inner < r_outer");
  }
}

void to_json(nlohmann::json& j, const BoundarySpec& bc) {
  nlohmann::json geo{{"hx", bc.geometry.hx}, {"hy", bc.geometry.hy}};
  if (bc.geometry.kind == GridGeometry::Kind::polar_annulus) {
    geo["kind"] = "polar_annulus";
    geo["r_inner"] = bc.geometry.r_inner;
    geo["r_outer"] = bc.geometry.r_outer;
  } else {
    geo["kind"] = "cartesian";
  }
  nlohmann::json edges = nlohmann::json::object();
  for (std::size_t e = 0; e < 4; ++e) {
    nlohmann::json c{{"kind", kind_name(bc.edges[e].kind)}};
    if (bc.edges[e].kind != BcKind::periodic) c["values"] = bc.edges[e].values;
    edges[std::string(kEdgeNames[e])] = std::move(c);
  }
  j = nlohmann::json{{"geometry", std::move(geo)}, {"edges", std::move(edges)}};
}

void from_json(const nlohmann::json& j, BoundarySpec& bc) {
  try {
    const auto& geo = j.at("geometry");
    const auto kind = geo.at("kind").get<std::string>();
    if (kind == "polar_annulus") {
      bc.geometry.kind = GridGeometry::Kind::polar_annulus;
      bc.geometry.r_inner = geo.at("r_inner").get<double>();
      bc.geometry.r_outer = geo.at("r_outer").get<double>();
    } else if (kind == "cartesian") {
      bc.geometry.kind = GridGeometry::Kind::cartesian;
    } else {
      throw ConfigError("unknown geometry kind '" + kind + "'");
    }
    bc.geometry.hx = geo.at("hx").get<double>();
    bc.geometry.hy = geo.at("hy").get<double>();
    for (std::size_t e = 0; e < 4; ++e) {
      const auto& c = j.at("edges").at(std::string(kEdgeNames[e]));
      bc.edges[e].kind = kind_from_name(c.at("kind").get<std::string>());
      bc.edges[e].values = bc.edges[e].kind == BcKind::periodic
                               ? std::vector<double>{}
                               : c.at("values").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("malformed boundary spec: ") + ex.what());
  }
}

Tensor apply_hard_constraint(const Tensor& field, const BoundarySpec& bc, std::size_t halo) {
  return pad_impl(field, bc, halo, true, "apply_hard_constraint");
}

Tensor pad_soft(const Tensor& field, const BoundarySpec& bc, std::size_t halo) {
  return pad_impl(field, bc, halo, false, "pad_soft");
}

Tensor crop_halo(const Tensor& padded, std::size_t halo) {
  check_field(padded, "crop_halo");
  const std::size_t n = padded.dim(0), ph = padded.dim(2), pw = padded.dim(3);
  if (ph <= 2 * halo || pw <= 2 * halo) throw ShapeError("crop_halo: halo larger than field");
  const std::size_t h = ph - 2 * halo, w = pw - 2 * halo;
  std::vector<AffineGather> plan(n * h * w);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        plan[(s * h + i) * w + j] = {static_cast<std::int64_t>((s * ph + i + halo) * pw + j + halo), 1.0, 0.0};
  return gather_affine(padded, {n, 1, h, w}, std::move(plan));
}

Tensor residual_mask(const BoundarySpec& bc, ConstraintMode mode, std::size_t h, std::size_t w,
                     std::size_t halo) {
  bc.validate(h, w);
  Tensor mask = Tensor::ones({1, 1, h, w});
  auto d = mask.mutable_data();
  auto kind = [&](Edge e) { return bc.edge(e).kind; };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      bool keep = true;
      if (i == 0 && kind(Edge::top) == BcKind::dirichlet) keep = false;
      if (i == h - 1 && kind(Edge::bottom) == BcKind::dirichlet) keep = false;
      if (j == 0 && kind(Edge::left) == BcKind::dirichlet) keep = false;
      if (j == w - 1 && kind(Edge::right) == BcKind::dirichlet) keep = false;
      if (mode == ConstraintMode::soft) {
        if (kind(Edge::top) != BcKind::periodic && (i < halo || i + halo >= h)) keep = false;
        if (kind(Edge::left) != BcKind::periodic && (j < halo || j + halo >= w)) keep = false;
      }
      d[i * w + j] = keep ? 1.0 : 0.0;
    }
  return mask;
}

Tensor boundary_penalty(const Tensor& pred, const BoundarySpec& bc, UnaryOp unary) {
  check_field(pred, "boundary_penalty");
  const std::size_t n = pred.dim(0), h = pred.dim(2), w = pred.dim(3);
  bc.validate(h, w);
  // mismatch = u[a] * sa + u[b] * sb - g, gathered as two affine plans
  std::vector<AffineGather> first, second;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t base = s * h * w;
    for (std::size_t e = 0; e < 4; ++e) {
      const auto& c = bc.edges[e];
      if (c.kind == BcKind::periodic) continue;
      const bool horizontal = e < 2;
      const std::size_t len = horizontal ? w : h;
      const double spacing = horizontal ? bc.geometry.hy : bc.geometry.hx;
      for (std::size_t k = 0; k < len; ++k) {
        std::size_t edge_idx = 0, inner_idx = 0;
        switch (static_cast<Edge>(e)) {
          case Edge::top: edge_idx = k; inner_idx = w + k; break;
          case Edge::bottom: edge_idx = (h - 1) * w + k; inner_idx = (h - 2) * w + k; break;
          case Edge::left: edge_idx = k * w; inner_idx = k * w + 1; break;
          case Edge::right: edge_idx = k * w + w - 1; inner_idx = k * w + w - 2; break;
        }
        const double g = c.values[k];
        if (c.kind == BcKind::dirichlet) {
          first.push_back({static_cast<std::int64_t>(base + edge_idx), 1.0, -g});
          second.push_back({-1, 0.0, 0.0});
        } else {
          if ((horizontal ? h : w) < 2) throw ShapeError("boundary_penalty: Neumann edge needs two nodes");
          first.push_back({static_cast<std::int64_t>(base + edge_idx), 1.0 / spacing, -g});
          second.push_back({static_cast<std::int64_t>(base + inner_idx), -1.0 / spacing, 0.0});
        }
      }
    }
  }
  if (first.empty()) return Tensor::scalar(0.0);
  const std::size_t count = first.size();
  Tensor mismatch = add(gather_affine(pred, {count}, std::move(first)),
                        gather_affine(pred, {count}, std::move(second)));
  return mean(apply_unary(mismatch, unary));
}

}  // namespace picnn
