#include "picnn/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"

namespace picnn {

std::string_view to_string(WeightOpKind k) {
  switch (k) {
    case WeightOpKind::topn: return "topn";
    case WeightOpKind::normalize: return "normalize";
    case WeightOpKind::pointwise_grad: return "pointwise_grad";
    case WeightOpKind::unitize: return "unitize";
  }
  return "unitize";
}

WeightOpKind weight_op_from_string(std::string_view name) {
  for (auto k : {WeightOpKind::topn, WeightOpKind::normalize, WeightOpKind::pointwise_grad, WeightOpKind::unitize}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown weight operator '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// genome

LossGenome LossGenome::vanilla() { return LossGenome{}; }

LossGenome LossGenome::hard_baseline() {
  LossGenome g;
  g.constraint = ConstraintMode::hard;
  g.boundary_loss = false;
  return g;
}

LossGenome LossGenome::canonical() const {
  LossGenome g = *this;
  const LossGenome plain;
  const WeightOp defaults;
  if (!g.gradient_enhance) g.lambda_g = plain.lambda_g;
  if (!g.boundary_loss) g.lambda_b = plain.lambda_b;
  if (g.weight.kind != WeightOpKind::topn) g.weight.topn_count = defaults.topn_count;
  if (g.weight.kind != WeightOpKind::normalize) g.weight.eta1 = defaults.eta1;
  if (g.weight.kind != WeightOpKind::pointwise_grad) g.weight.rho = defaults.rho;
  return g;
}

std::string LossGenome::key() const { return nlohmann::json(canonical()).dump(); }

void LossGenome::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("loss genome: ") + name + " must be >= 0");
  };
  nonneg(lambda_r, "lambda_r");
  nonneg(lambda_b, "lambda_b");
  nonneg(lambda_g, "lambda_g");
  nonneg(weight.rho, "rho");
  if (!std::isfinite(weight.eta1) || weight.eta1 <= 0.0) throw ConfigError("loss genome: eta1 must be > 0");
}

void to_json(nlohmann::json& j, const LossGenome& g) {
  j = {{"constraint", to_string(g.constraint)},
       {"kernel", to_string(g.kernel)},
       {"unary", to_string(g.unary)},
       {"gradient_enhance", g.gradient_enhance},
       {"lambda_g", g.lambda_g},
       {"weight_op",
        {{"kind", to_string(g.weight.kind)},
         {"topn_count", g.weight.topn_count},
         {"eta1", g.weight.eta1},
         {"rho", g.weight.rho}}},
       {"add_ones", g.add_ones},
       {"boundary_loss", g.boundary_loss},
       {"lambda_r", g.lambda_r},
       {"lambda_b", g.lambda_b}};
}

void from_json(const nlohmann::json& j, LossGenome& g) {
  try {
    g = LossGenome{};
    g.constraint = constraint_mode_from_string(j.value("constraint", std::string(to_string(g.constraint))));
    try {
      g.kernel = kernel_family_from_string(j.value("kernel", std::string(to_string(g.kernel))));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    g.unary = unary_op_from_string(j.value("unary", std::string(to_string(g.unary))));
    g.gradient_enhance = j.value("gradient_enhance", g.gradient_enhance);
    g.lambda_g = j.value("lambda_g", g.lambda_g);
    if (j.contains("weight_op")) {
      const auto& w = j.at("weight_op");
      g.weight.kind = weight_op_from_string(w.value("kind", std::string("unitize")));
      g.weight.topn_count = w.value("topn_count", g.weight.topn_count);
      g.weight.eta1 = w.value("eta1", g.weight.eta1);
      g.weight.rho = w.value("rho", g.weight.rho);
    }
    g.add_ones = j.value("add_ones", g.add_ones);
    g.boundary_loss = j.value("boundary_loss", g.boundary_loss);
    g.lambda_r = j.value("lambda_r", g.lambda_r);
    g.lambda_b = j.value("lambda_b", g.lambda_b);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss genome: ") + e.what());
  }
  g.validate();
}

bool operator==(const LossGenome& a, const LossGenome& b) { return a.key() == b.key(); }

// ---------------------------------------------------------------------------
// search space

std::vector<LossGenome> LossSpace::enumerate() const {
  std::vector<WeightOp> ops;
  if (topn) ops.push_back({WeightOpKind::topn, 0, 1.0, 0.01});
  for (double e : eta1) ops.push_back({WeightOpKind::normalize, 0, e, 0.01});
  for (double r : rho) ops.push_back({WeightOpKind::pointwise_grad, 0, 1.0, r});
  if (unitize) ops.push_back({WeightOpKind::unitize, 0, 1.0, 0.01});

  std::vector<std::pair<bool, double>> ge{{false, 0.1}}, bl{{false, 1.0}};
  for (double l : lambda_g) ge.emplace_back(true, l);
  for (double l : lambda_b) bl.emplace_back(true, l);

  std::vector<LossGenome> out;
  for (auto c : constraints)
    for (auto k : kernels)
      for (auto u : unaries)
        for (auto [g_on, lg] : ge)
          for (const auto& op : ops)
            for (bool ones : {false, true})
              for (auto [b_on, lb] : bl) {
                LossGenome g;
                g.constraint = c;
                g.kernel = k;
                g.unary = u;
                g.gradient_enhance = g_on;
                g.lambda_g = lg;
                g.weight = op;
                g.add_ones = ones;
                g.boundary_loss = b_on;
                g.lambda_b = lb;
                out.push_back(g.canonical());
              }
  return out;
}

namespace {

template <class T>
void one_hot(std::vector<double>& x, const std::vector<T>& options, T value) {
  for (const auto& o : options) x.push_back(o == value ? 1.0 : 0.0);
}

double log_position(const std::vector<double>& options, double v) {
  if (options.empty()) return 0.5;
  const auto [lo, hi] = std::minmax_element(options.begin(), options.end());
  if (*hi <= *lo || *lo <= 0.0 || v <= 0.0) return 0.5;
  return (std::log(v) - std::log(*lo)) / (std::log(*hi) - std::log(*lo));
}

}  // namespace

std::vector<double> LossSpace::encode(const LossGenome& g) const {
  std::vector<double> x;
  one_hot(x, constraints, g.constraint);
  one_hot(x, kernels, g.kernel);
  one_hot(x, unaries, g.unary);
  one_hot(x, std::vector<WeightOpKind>{WeightOpKind::topn, WeightOpKind::normalize, WeightOpKind::pointwise_grad,
                                       WeightOpKind::unitize},
          g.weight.kind);
  x.push_back(g.gradient_enhance ? 1.0 : 0.0);
  x.push_back(g.gradient_enhance ? log_position(lambda_g, g.lambda_g) : 0.0);
  x.push_back(g.weight.kind == WeightOpKind::normalize ? log_position(eta1, g.weight.eta1) : 0.0);
  x.push_back(g.weight.kind == WeightOpKind::pointwise_grad ? log_position(rho, g.weight.rho) : 0.0);
  x.push_back(g.add_ones ? 1.0 : 0.0);
  x.push_back(g.boundary_loss ? 1.0 : 0.0);
  x.push_back(g.boundary_loss ? log_position(lambda_b, g.lambda_b) : 0.0);
  return x;
}

void to_json(nlohmann::json& j, const LossSpace& s) {
  auto names = [](const auto& v) {
    std::vector<std::string> out;
    for (const auto& e : v) out.emplace_back(to_string(e));
    return out;
  };
  j = {{"constraints", names(s.constraints)},
       {"kernels", names(s.kernels)},
       {"unaries", names(s.unaries)},
       {"lambda_g", s.lambda_g},
       {"eta1", s.eta1},
       {"rho", s.rho},
       {"topn", s.topn},
       {"unitize", s.unitize},
       {"lambda_b", s.lambda_b}};
}

void from_json(const nlohmann::json& j, LossSpace& s) {
  try {
    s = LossSpace{};
    if (j.contains("constraints")) {
      s.constraints.clear();
      for (const auto& n : j.at("constraints")) s.constraints.push_back(constraint_mode_from_string(n.get<std::string>()));
    }
    if (j.contains("kernels")) {
      s.kernels.clear();
      for (const auto& n : j.at("kernels")) {
        try {
          s.kernels.push_back(kernel_family_from_string(n.get<std::string>()));
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      }
    }
    if (j.contains("unaries")) {
      s.unaries.clear();
      for (const auto& n : j.at("unaries")) s.unaries.push_back(unary_op_from_string(n.get<std::string>()));
    }
    s.lambda_g = j.value("lambda_g", s.lambda_g);
    s.eta1 = j.value("eta1", s.eta1);
    s.rho = j.value("rho", s.rho);
    s.topn = j.value("topn", s.topn);
    s.unitize = j.value("unitize", s.unitize);
    s.lambda_b = j.value("lambda_b", s.lambda_b);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss space: ") + e.what());
  }
  if (s.constraints.empty() || s.kernels.empty() || s.unaries.empty()) {
    throw ConfigError("loss space: constraint, kernel and unary lists must be non-empty");
  }
  if (!s.topn && !s.unitize && s.eta1.empty() && s.rho.empty()) {
    throw ConfigError("loss space: no weight operator enabled");
  }
}

// ---------------------------------------------------------------------------
// weights

WeightState::Mode WeightState::mode_for(WeightOpKind kind) {
  return kind == WeightOpKind::topn || kind == WeightOpKind::pointwise_grad ? Mode::cumulative : Mode::direct;
}

std::vector<double>& WeightState::of(std::size_t sample, std::size_t size, double initial) {
  auto [it, inserted] = weights.try_emplace(sample, size, initial);
  if (it->second.size() != size) throw ShapeError("WeightState: sample weight size changed");
  return it->second;
}

void weight_update_topn(std::span<const double> residue, std::span<const double> mask, std::vector<double>& weights,
                        std::size_t n) {
  if (residue.size() != mask.size() || residue.size() != weights.size()) {
    throw ShapeError("weight_update_topn: residue, mask and weights differ in size");
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < residue.size(); ++i) {
    if (mask[i] > 0.0) idx.push_back(i);
  }
  if (n == 0 || n > idx.size()) {
    throw std::out_of_range("weight_update_topn: N=" + std::to_string(n) + " outside [1, " +
                            std::to_string(idx.size()) + "]");
  }
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ra = std::abs(residue[a]), rb = std::abs(residue[b]);
                      return ra != rb ? ra > rb : a < b;
                    });
  for (std::size_t k = 0; k < n; ++k) weights[idx[k]] += 1.0;
}

std::vector<double> weight_update_normalize(std::span<const double> residue, std::span<const double> mask,
                                            double eta1) {
  if (residue.size() != mask.size()) throw ShapeError("weight_update_normalize: residue and mask differ in size");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < residue.size(); ++i) {
    if (mask[i] <= 0.0) continue;
    lo = std::min(lo, std::abs(residue[i]));
    hi = std::max(hi, std::abs(residue[i]));
  }
  std::vector<double> w(residue.size(), 0.0);
  if (!(hi > lo)) return w;
  for (std::size_t i = 0; i < residue.size(); ++i) {
    if (mask[i] > 0.0) w[i] = eta1 * (std::abs(residue[i]) - lo) / (hi - lo);
  }
  return w;
}

void weight_update_pointwise_grad(std::span<const double> dloss_dw, std::vector<double>& weights, double rho) {
  if (dloss_dw.size() != weights.size()) throw ShapeError("weight_update_pointwise_grad: size mismatch");
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] += rho * dloss_dw[i];
}

std::size_t topn_count(const WeightOp& op, std::size_t masked_points) {
  if (op.topn_count > 0) return op.topn_count;
  return std::max<std::size_t>(1, masked_points / 100);
}

// ---------------------------------------------------------------------------
// gradient enhancement

namespace {

Tensor tile_batch(const Tensor& plane, std::size_t n) {
  if (n == 1) return plane;
  std::vector<double> v;
  v.reserve(plane.numel() * n);
  for (std::size_t i = 0; i < n; ++i) v.insert(v.end(), plane.data().begin(), plane.data().end());
  Shape s = plane.shape();
  s[0] = n;
  return Tensor::from(std::move(s), std::move(v));
}

// Points whose whole kernel window lies inside the mask.
Tensor eroded_mask(const Tensor& mask, std::size_t h, std::size_t w, const StencilKernel& k) {
  Tensor valid = stencil_valid_mask(h, w, k);
  if (!mask.defined()) return valid;
  const auto m = mask.data();
  auto v = valid.mutable_data();
  const auto ry = static_cast<std::ptrdiff_t>(k.radius_y()), rx = static_cast<std::ptrdiff_t>(k.radius_x());
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t i = 0; i < H; ++i) {
    for (std::ptrdiff_t j = 0; j < W; ++j) {
      double& out = v[static_cast<std::size_t>(i * W + j)];
      if (out == 0.0) continue;
      for (std::ptrdiff_t di = -ry; di <= ry && out != 0.0; ++di) {
        for (std::ptrdiff_t dj = -rx; dj <= rx; ++dj) {
          if (m[static_cast<std::size_t>((i + di) * W + j + dj)] <= 0.0) {
            out = 0.0;
            break;
          }
        }
      }
    }
  }
  return valid;
}

double plane_sum(const Tensor& t) {
  const auto d = t.data();
  return std::accumulate(d.begin(), d.end(), 0.0);
}

bool same_boundary(const BoundarySpec& a, const BoundarySpec& b) {
  for (std::size_t e = 0; e < 4; ++e) {
    if (a.edges[e].kind != b.edges[e].kind || a.edges[e].values != b.edges[e].values) return false;
  }
  const auto& ga = a.geometry;
  const auto& gb = b.geometry;
  return ga.kind == gb.kind && ga.hx == gb.hx && ga.hy == gb.hy && ga.r_inner == gb.r_inner &&
         ga.r_outer == gb.r_outer;
}

}  // namespace

Tensor gradient_enhanced_terms(const Tensor& residual, const Tensor& mask, const StencilSet& stencils, UnaryOp unary,
                               double lambda_g) {
  if (residual.ndim() != 4 || residual.dim(1) != 1) {
    throw ShapeError("gradient_enhanced_terms: residual must be [N,1,H,W], got " + shape_str(residual.shape()));
  }
  const std::size_t n = residual.dim(0), h = residual.dim(2), w = residual.dim(3);
  Tensor total = Tensor::scalar(0.0);
  for (const StencilKernel* k : {&stencils.dx, &stencils.dy}) {
    Tensor valid = eroded_mask(mask, h, w, *k);
    const double count = plane_sum(valid) * static_cast<double>(n);
    if (count == 0.0) continue;
    Tensor g = apply_unary(apply_stencil(residual, *k), unary);
    total = add(total, mul_scalar(sum(mul(g, tile_batch(valid, n))), 1.0 / count));
  }
  return mul_scalar(total, lambda_g);
}

// ---------------------------------------------------------------------------
// evaluator

LossEvaluator::LossEvaluator(LossGenome genome, PdeKind problem) : genome_(std::move(genome)), problem_(problem) {
  genome_.validate();
}

Tensor LossEvaluator::constrained(const Tensor& output, const GridSample& sample) const {
  if (genome_.constraint == ConstraintMode::soft) return output;
  return apply_hard_constraint(output, sample.bc, 0);
}

LossTerms LossEvaluator::operator()(const Tensor& output, std::span<const GridSample* const> batch,
                                    std::span<const std::size_t> ids, WeightState& state) const {
  const std::size_t n = batch.size();
  if (n == 0 || output.ndim() != 4 || output.dim(0) != n || output.dim(1) != 1) {
    throw ShapeError("LossEvaluator: output " + shape_str(output.shape()) + " does not match a batch of " +
                     std::to_string(n));
  }
  if (!ids.empty() && ids.size() != n) throw ShapeError("LossEvaluator: ids and batch differ in length");

  WeightState scratch;
  WeightState& ws = ids.empty() ? scratch : state;
  ws.mode = WeightState::mode_for(genome_.weight.kind);

  const std::size_t h = output.dim(2), w = output.dim(3), plane = h * w;
  const StencilSet stencils = StencilSet::make(genome_.kernel, batch[0]->bc.geometry);

  // samples sharing a boundary spec are evaluated together
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return same_boundary(batch[g.front()]->bc, batch[i]->bc); });
    if (it == groups.end()) {
      groups.push_back({i});
    } else {
      it->push_back(i);
    }
  }

  Tensor res_sum = Tensor::scalar(0.0), bnd_sum = Tensor::scalar(0.0), grad_sum = Tensor::scalar(0.0);
  double mask_count = 0.0;

  for (const auto& group : groups) {
    const BoundarySpec& bc = batch[group.front()]->bc;
    const std::size_t m = group.size();
    Tensor out_g, in_g;
    if (m == n) {
      out_g = output;
    } else {
      std::vector<Tensor> parts;
      for (std::size_t i : group) parts.push_back(slice_batch(output, i));
      out_g = stack_batch(parts);
    }
    {
      std::vector<double> in;
      in.reserve(m * plane);
      for (std::size_t i : group) {
        const auto d = batch[i]->input.data();
        in.insert(in.end(), d.begin(), d.begin() + static_cast<std::ptrdiff_t>(plane));
      }
      in_g = Tensor::from({m, 1, h, w}, std::move(in));
    }

    ResidualEvaluation ev = evaluate_residual(problem_, out_g, in_g, bc, stencils, genome_.constraint);
    Tensor u = apply_unary(ev.residual, genome_.unary);
    const auto mask = ev.mask.data();
    const auto r = ev.residual.data();
    const auto ud = u.data();

    std::vector<double> wm(m * plane);
    for (std::size_t s = 0; s < m; ++s) {
      const std::size_t id = ids.empty() ? group[s] : ids[group[s]];
      std::span<const double> rs = r.subspan(s * plane, plane);
      std::vector<double> weights;
      switch (genome_.weight.kind) {
        case WeightOpKind::unitize:
          weights.assign(plane, 1.0);
          break;
        case WeightOpKind::normalize:
          weights = weight_update_normalize(rs, mask, genome_.weight.eta1);
          break;
        case WeightOpKind::topn: {
          auto& acc = ws.of(id, plane, 0.0);
          const auto masked = static_cast<std::size_t>(plane_sum(ev.mask));
          weight_update_topn(rs, mask, acc, topn_count(genome_.weight, masked));
          weights = acc;
          break;
        }
        case WeightOpKind::pointwise_grad: {
          auto& acc = ws.of(id, plane, 1.0);
          weights = acc;
          // dL/dw of the summed weighted residue
          std::vector<double> grad(plane);
          for (std::size_t p = 0; p < plane; ++p) grad[p] = genome_.lambda_r * ud[s * plane + p] * mask[p];
          weight_update_pointwise_grad(grad, acc, genome_.weight.rho);
          break;
        }
      }
      for (std::size_t p = 0; p < plane; ++p) {
        wm[s * plane + p] = (weights[p] + (genome_.add_ones ? 1.0 : 0.0)) * mask[p];
      }
    }
    res_sum = add(res_sum, sum(mul(u, Tensor::from({m, 1, h, w}, std::move(wm)))));
    mask_count += plane_sum(ev.mask) * static_cast<double>(m);

    if (genome_.boundary_loss) {
      const Tensor& pred = genome_.constraint == ConstraintMode::hard ? ev.field : out_g;
      bnd_sum = add(bnd_sum, mul_scalar(boundary_penalty(pred, bc, genome_.unary), static_cast<double>(m)));
    }
    if (genome_.gradient_enhance) {
      Tensor g = gradient_enhanced_terms(ev.residual, ev.mask, stencils, genome_.unary, genome_.lambda_g);
      grad_sum = add(grad_sum, mul_scalar(g, static_cast<double>(m)));
    }
  }

  LossTerms terms;
  Tensor res_term = mask_count > 0.0 ? mul_scalar(res_sum, genome_.lambda_r / mask_count) : Tensor::scalar(0.0);
  Tensor bnd_term = mul_scalar(bnd_sum, genome_.lambda_b / static_cast<double>(n));
  Tensor grad_term = mul_scalar(grad_sum, 1.0 / static_cast<double>(n));
  terms.residual = res_term.item();
  terms.boundary = bnd_term.item();
  terms.gradient = grad_term.item();
  terms.total = add(add(res_term, bnd_term), grad_term);
  return terms;
}

}  // namespace picnn
