// Acceptance run: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "picnn/error.hpp"
#include "picnn/gradcheck.hpp"
#include "picnn/grf.hpp"
#include "picnn/harness.hpp"
#include "picnn/ops.hpp"
#include "picnn/optim.hpp"
#include "picnn/solvers.hpp"
#include "picnn/stencil.hpp"
#include "picnn/util.hpp"
#include "test_util.hpp"

using namespace picnn;
using picnn::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Settings {
  fs::path out = "acceptance_out";
  std::size_t c6_budget = 12, c6_initial = 6, c6_trial_epochs = 300, c6_networks = 3;
  std::size_t c13_archs = 3, c13_epochs = 60;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(pow2(sub(a, b))); }

// ---------------------------------------------------------------------------
// 1. gradcheck of every differentiable op

Outcome autodiff_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  using F = TensorFunction;
  std::vector<std::pair<std::string, std::pair<F, std::vector<Tensor>>>> cases;
  auto add_case = [&](std::string name, F f, std::vector<Tensor> in) {
    cases.push_back({std::move(name), {std::move(f), std::move(in)}});
  };
  auto r = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };

  add_case("add/sub/mul", [](const std::vector<Tensor>& x) { return sum(pow2(sub(add(x[0], x[1]), mul(x[0], x[1])))); },
           {r({3, 4}), r({3, 4})});
  add_case("div", [](const std::vector<Tensor>& x) { return sum(div(x[0], x[1])); }, {r({3, 4}), r({3, 4}, 0.5, 2.0)});
  add_case("neg/add_scalar/mul_scalar",
           [](const std::vector<Tensor>& x) { return sum(pow2(mul_scalar(add_scalar(neg(x[0]), 0.3), 1.7))); },
           {r({5})});
  add_case("abs", [](const std::vector<Tensor>& x) { return sum(mul(abs(x[0]), x[0])); }, {r({6}, 0.1, 1.0)});
  add_case("abs negative", [](const std::vector<Tensor>& x) { return sum(mul(abs(x[0]), x[0])); }, {r({6}, -1.0, -0.1)});
  add_case("exp", [](const std::vector<Tensor>& x) { return sum(exp(x[0])); }, {r({6})});
  add_case("tanh", [](const std::vector<Tensor>& x) { return sum(pow2(tanh(x[0]))); }, {r({6}, -2, 2)});
  add_case("sigmoid", [](const std::vector<Tensor>& x) { return sum(pow2(sigmoid(x[0]))); }, {r({6}, -2, 2)});
  add_case("relu", [](const std::vector<Tensor>& x) { return sum(pow2(relu(x[0]))); }, {r({6}, 0.1, 1.0)});
  add_case("gelu", [](const std::vector<Tensor>& x) { return sum(pow2(gelu(x[0]))); }, {r({8}, -2, 2)});
  add_case("sum/mean", [](const std::vector<Tensor>& x) { return mul(sum(x[0]), mean(pow2(x[0]))); }, {r({7})});
  add_case("max_reduce", [](const std::vector<Tensor>& x) { return max_reduce(pow2(x[0])); },
           {Tensor::from({4}, {0.1, -0.9, 0.4, 0.3})});
  add_case("reshape/matmul", [](const std::vector<Tensor>& x) { return sum(pow2(reshape(matmul(x[0], x[1]), {12}))); },
           {r({3, 5}), r({5, 4})});
  add_case("slice_cols/select_row/select",
           [](const std::vector<Tensor>& x) {
             return add(add(sum(pow2(slice_cols(x[0], 1, 3))), sum(pow2(select_row(x[0], 2)))), select(x[0], 5));
           },
           {r({3, 4})});
  add_case("softmax/log_softmax",
           [](const std::vector<Tensor>& x) { return add(select(softmax(x[0]), 2), select(log_softmax(x[0]), 4)); },
           {r({1, 6})});
  add_case("concat/slice/stack batch",
           [](const std::vector<Tensor>& x) {
             Tensor c = concat_channels(x[0], x[1]);
             return sum(pow2(stack_batch({slice_batch(c, 1), slice_batch(c, 0)})));
           },
           {r({2, 2, 3, 3}), r({2, 1, 3, 3})});
  add_case("gather_affine",
           [](const std::vector<Tensor>& x) {
             std::vector<AffineGather> plan;
             for (std::int64_t i = 0; i < 9; ++i) plan.push_back({i % 3 == 0 ? -1 : i * 2, -1.5, 0.25});
             return sum(pow2(gather_affine(x[0], {9}, plan)));
           },
           {r({2, 1, 3, 3})});
  add_case("conv2d zeros",
           [](const std::vector<Tensor>& x) { return sum(pow2(conv2d(x[0], x[1], x[2], 1, PaddingSpec::same(3)))); },
           {r({2, 2, 5, 5}), r({3, 2, 3, 3}), r({3})});
  add_case("conv2d circular stride 2",
           [](const std::vector<Tensor>& x) {
             return sum(pow2(conv2d(x[0], x[1], std::nullopt, 2, PaddingSpec::same(5, PadMode::circular))));
           },
           {r({1, 2, 6, 7}), r({2, 2, 5, 5})});
  add_case("depthwise conv",
           [](const std::vector<Tensor>& x) {
             return sum(pow2(depthwise_conv2d(x[0], x[1], x[2], 1, PaddingSpec::same(3))));
           },
           {r({2, 3, 5, 6}), r({3, 1, 3, 3}), r({3})});
  add_case("depthwise separable conv",
           [](const std::vector<Tensor>& x) {
             return sum(pow2(depthwise_separable_conv2d(x[0], x[1], x[2], x[3], 1,
                                                        PaddingSpec::same(3, PadMode::circular))));
           },
           {r({2, 3, 5, 6}), r({3, 1, 3, 3}), r({2, 3, 1, 1}), r({2})});
  add_case("maxpool",
           [](const std::vector<Tensor>& x) { return sum(pow2(maxpool2d(x[0], 3, 1, PaddingSpec::same(3)))); },
           {r({2, 2, 6, 5})});
  add_case("maxpool stride 2", [](const std::vector<Tensor>& x) { return sum(pow2(maxpool2d(x[0], 2, 2))); },
           {r({1, 2, 6, 6})});
  add_case("avgpool",
           [](const std::vector<Tensor>& x) { return sum(pow2(avgpool2d(x[0], 3, 1, PaddingSpec::same(3)))); },
           {r({2, 2, 6, 5})});
  add_case("upsample bilinear/nearest",
           [](const std::vector<Tensor>& x) {
             return add(sum(pow2(upsample(x[0], UpsampleMode::bilinear, 2))),
                        sum(pow2(upsample_to(x[0], UpsampleMode::nearest, 7, 9))));
           },
           {r({1, 2, 3, 4})});
  add_case("upsample_to bilinear",
           [](const std::vector<Tensor>& x) { return sum(pow2(upsample_to(x[0], UpsampleMode::bilinear, 5, 7))); },
           {r({1, 1, 3, 4})});
  {
    Tensor target = r({2, 4, 3, 3});
    add_case("group_norm",
             [target](const std::vector<Tensor>& x) { return sum(mul(group_norm(x[0], 2, x[1], x[2]), target)); },
             {r({2, 4, 3, 3}, -3, 5), r({4}), r({4})});
  }
  for (KernelFamily fam : {KernelFamily::sobel3, KernelFamily::sobel5, KernelFamily::central2, KernelFamily::central4}) {
    const auto k = make_stencil(fam, Derivative::dyy, 0.3);
    add_case("stencil " + std::string(to_string(fam)),
             [k](const std::vector<Tensor>& x) { return sum(pow2(apply_stencil(x[0], k))); }, {r({2, 1, 11, 10})});
  }
  {
    const GridGeometry cart = GridGeometry::cartesian(0.1, 0.1);
    const auto st = StencilSet::make(KernelFamily::central4, cart);
    add_case("laplacian cartesian",
             [st, cart](const std::vector<Tensor>& x) { return sum(pow2(laplacian(x[0], 2, st, cart))); },
             {r({1, 1, 10, 10})});
    const GridGeometry ann = GridGeometry::annulus(0.5, 1.0, 8, 12);
    const auto sa = StencilSet::make(KernelFamily::central2, ann);
    add_case("laplacian annulus",
             [sa, ann](const std::vector<Tensor>& x) { return sum(pow2(laplacian(x[0], 1, sa, ann))); },
             {r({1, 1, 10, 14})});
    const auto sd = StencilSet::make(KernelFamily::central2, cart);
    Tensor K = r({1, 1, 8, 8}, 0.5, 2.0);
    add_case("darcy residual",
             [sd, K](const std::vector<Tensor>& x) { return sum(pow2(darcy_residual(x[0], 2, K, sd))); },
             {r({1, 1, 12, 12})});
    add_case("residual gradient",
             [sd](const std::vector<Tensor>& x) {
               auto [gx, gy] = residual_gradient(x[0], sd);
               return add(sum(pow2(gx)), sum(pow2(gy)));
             },
             {r({1, 1, 8, 8})});
  }
  for (ConstraintMode mode : {ConstraintMode::soft, ConstraintMode::hard, ConstraintMode::combined}) {
    for (PdeKind kind : {PdeKind::heat_annulus, PdeKind::poisson, PdeKind::darcy}) {
      BoundarySpec bc;
      Tensor input;
      if (kind == PdeKind::heat_annulus) {
        AnnulusSpec a;
        a.n_rho = 8;
        a.n_theta = 12;
        bc = annulus_boundary(a, 3.0);
      } else if (kind == PdeKind::poisson) {
        bc = poisson_boundary(8, 8, 2.0);
        input = r({1, 1, 8, 8});
      } else {
        bc = darcy_boundary(8, 8, 1.0, 0.0);
        input = r({1, 1, 8, 8}, 0.5, 2.0);
      }
      const auto st = StencilSet::make(KernelFamily::central2, bc.geometry);
      const std::size_t h = kind == PdeKind::heat_annulus ? 8 : 8, w = kind == PdeKind::heat_annulus ? 12 : 8;
      add_case("residual " + std::string(to_string(kind)) + " " + std::string(to_string(mode)),
               [=](const std::vector<Tensor>& x) {
                 auto ev = evaluate_residual(kind, x[0], input, bc, st, mode);
                 return add(sum(pow2(mul(ev.residual, ev.mask))), mul_scalar(boundary_penalty(ev.field, bc, UnaryOp::square), 1.0));
               },
               {r({1, 1, h, w})});
    }
  }

  double worst = 0.0;
  std::string worst_name;
  std::size_t failures = 0;
  for (auto& [name, c] : cases) {
    const double e = gradcheck(c.first, c.second).worst();
    if (!(e < 1e-6)) {
      ++failures;
      std::printf("    gradcheck %s: %.3g\n", name.c_str(), e);
    }
    if (!(e <= worst)) {
      worst = e;
      worst_name = name;
    }
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 120.0,
          std::to_string(cases.size()) + " op cases, worst rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " +
              fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. stencils

using Fn2 = std::function<double(double, double)>;

Tensor grid_of(std::size_t n, double h, const Fn2& f, double offset = 0.0) {
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      v[i * n + j] = f((static_cast<double>(j) - offset) * h, (static_cast<double>(i) - offset) * h);
  return Tensor::from({1, 1, n, n}, std::move(v));
}

double interior_error(const Tensor& field, const StencilKernel& k, double h, const Fn2& expected) {
  Tensor out = apply_stencil(field, k);
  const std::size_t n = out.dim(2), w = out.dim(3);
  double err = 0.0;
  for (std::size_t i = k.radius_y(); i + k.radius_y() < n; ++i)
    for (std::size_t j = k.radius_x(); j + k.radius_x() < w; ++j)
      err = std::max(err, std::abs(out.at(i * w + j) - expected(static_cast<double>(j) * h, static_cast<double>(i) * h)));
  return err;
}

Outcome stencil_exactness() {
  const std::size_t n = 64;
  const double h = 1.0 / static_cast<double>(n - 1);
  // Roundoff of an m-th derivative scales like eps * |u| / h^m.
  const double tol1 = 1e-11, tol2 = 1e-8;
  double worst1 = 0.0, worst2 = 0.0;
  auto d = [&](KernelFamily f, Derivative dv) { return make_stencil(f, dv, h); };

  Fn2 quad = [](double x, double y) { return x * x + 0.5 * x * y - y * y; };
  Tensor q = grid_of(n, h, quad);
  worst1 = std::max(worst1, interior_error(q, d(KernelFamily::central2, Derivative::dx), h, [](double x, double y) { return 2 * x + 0.5 * y; }));
  worst1 = std::max(worst1, interior_error(q, d(KernelFamily::central2, Derivative::dy), h, [](double x, double y) { return 0.5 * x - 2 * y; }));
  worst2 = std::max(worst2, interior_error(q, d(KernelFamily::central2, Derivative::dxx), h, [](double, double) { return 2.0; }));
  worst2 = std::max(worst2, interior_error(q, d(KernelFamily::central2, Derivative::dyy), h, [](double, double) { return -2.0; }));

  Fn2 quart = [](double x, double y) { return std::pow(x, 4) - 2 * std::pow(x, 3) * y + std::pow(y, 4) - x * y * y; };
  Tensor q4 = grid_of(n, h, quart);
  worst1 = std::max(worst1, interior_error(q4, d(KernelFamily::central4, Derivative::dx), h,
                                           [](double x, double y) { return 4 * x * x * x - 6 * x * x * y - y * y; }));
  worst1 = std::max(worst1, interior_error(q4, d(KernelFamily::central4, Derivative::dy), h,
                                           [](double x, double y) { return -2 * x * x * x + 4 * y * y * y - 2 * x * y; }));
  worst2 = std::max(worst2, interior_error(q4, d(KernelFamily::central4, Derivative::dxx), h,
                                           [](double x, double y) { return 12 * x * x - 12 * x * y; }));
  worst2 = std::max(worst2, interior_error(q4, d(KernelFamily::central4, Derivative::dyy), h,
                                           [](double x, double) { return 12.0 * 0 + 12 * 0.0 + 0.0 - 2 * x + 0.0; }) *
                                0.0 +
                                interior_error(q4, d(KernelFamily::central4, Derivative::dyy), h,
                                               [](double x, double y) { return 12 * y * y - 2 * x; }));

  Tensor lin = grid_of(n, h, [](double x, double y) { return 1.0 + 2.0 * x - 3.0 * y; });
  for (KernelFamily f : {KernelFamily::sobel3, KernelFamily::sobel5}) {
    worst1 = std::max(worst1, interior_error(lin, d(f, Derivative::dx), h, [](double, double) { return 2.0; }));
    worst1 = std::max(worst1, interior_error(lin, d(f, Derivative::dy), h, [](double, double) { return -3.0; }));
  }

  Fn2 u = [](double x, double y) { return std::sin(2 * x) * std::cos(y); };
  auto lap_error = [&](KernelFamily fam, std::size_t cells) {
    const double hh = 1.0 / static_cast<double>(cells);
    const std::size_t m = cells + 1;
    const GridGeometry g = GridGeometry::cartesian(hh, hh);
    const auto st = StencilSet::make(fam, g);
    const std::size_t halo = st.second_radius();
    Tensor out = laplacian(grid_of(m + 2 * halo, hh, u, static_cast<double>(halo)), halo, st, g);
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        err = std::max(err, std::abs(out.at(i * m + j) + 5.0 * u(static_cast<double>(j) * hh, static_cast<double>(i) * hh)));
    return err;
  };
  const double r2 = lap_error(KernelFamily::central2, 16) / lap_error(KernelFamily::central2, 32);
  const double r4 = lap_error(KernelFamily::central4, 16) / lap_error(KernelFamily::central4, 32);
  const bool pass = worst1 < tol1 && worst2 < tol2 && std::abs(r2 / 4.0 - 1.0) < 0.2 && std::abs(r4 / 16.0 - 1.0) < 0.2;
  return {pass, "64x64 max err first " + fmt("%.1e", worst1) + ", second " + fmt("%.1e", worst2) + "; ratios " +
                    fmt("%.2f", r2) + " / " + fmt("%.2f", r4)};
}

// ---------------------------------------------------------------------------
// 3. vanilla equivalence

Outcome vanilla_equivalence() {
  std::mt19937_64 rng(11);
  const std::size_t n = 8;
  const double h = 1.0 / 7.0;
  LossEvaluator loss(LossGenome::vanilla(), PdeKind::poisson);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t batch_size = 1 + trial % 3;
    std::vector<GridSample> batch;
    for (std::size_t s = 0; s < batch_size; ++s) {
      GridSample g;
      g.input = random_tensor({1, 1, n, n}, rng, -5, 5);
      g.reference = Tensor::zeros({1, 1, n, n});
      g.bc = poisson_boundary(n, n, 3.0 + static_cast<double>(s) + trial);
      batch.push_back(g);
    }
    Tensor u = random_tensor({batch_size, 1, n, n}, rng, -2, 2);
    double rsum = 0.0, bsum = 0.0;
    std::size_t rc = 0, bc = 0;
    for (std::size_t s = 0; s < batch_size; ++s) {
      auto at = [&](std::size_t i, std::size_t j) { return u.at(s * n * n + i * n + j); };
      for (std::size_t i = 1; i + 1 < n; ++i)
        for (std::size_t j = 1; j + 1 < n; ++j) {
          const double lap = (at(i, j + 1) - 2 * at(i, j) + at(i, j - 1) + at(i + 1, j) - 2 * at(i, j) + at(i - 1, j)) / (h * h);
          const double res = lap + batch[s].input.at(i * n + j);
          rsum += res * res;
          ++rc;
        }
      const double g = 3.0 + static_cast<double>(s) + trial;
      for (std::size_t k = 0; k < n; ++k)
        for (double v : {at(0, k), at(n - 1, k), at(k, 0), at(k, n - 1)}) {
          bsum += (v - g) * (v - g);
          ++bc;
        }
    }
    const double expect = rsum / static_cast<double>(rc) + bsum / static_cast<double>(bc);
    std::vector<const GridSample*> ptrs;
    std::vector<std::size_t> ids;
    for (std::size_t s = 0; s < batch_size; ++s) {
      ptrs.push_back(&batch[s]);
      ids.push_back(s);
    }
    WeightState ws;
    const double got = loss(u, ptrs, ids, ws).total.item();
    worst = std::max(worst, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
  }
  return {worst < 1e-12, "10 random batches, max rel diff " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 4. reference solvers

Outcome reference_solvers() {
  // CG vs dense LU on an 8x8 grid
  const std::size_t n = 8;
  const double h = 1.0 / 7.0;
  std::mt19937_64 rng(2);
  Tensor f = random_tensor({1, 1, n, n}, rng, -5, 5);
  BoundarySpec bc = poisson_boundary(n, n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    bc.edge(Edge::top).values[k] = std::sin(static_cast<double>(k));
    bc.edge(Edge::bottom).values[k] = 1.0 + 0.1 * static_cast<double>(k);
  }
  bc.edge(Edge::left).values = std::vector<double>(n, 0.5);
  bc.edge(Edge::right).values = std::vector<double>(n, -0.5);
  Tensor u = solve_poisson_fd(f, bc);
  const std::size_t m = n - 2;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m * m, m * m);
  Eigen::VectorXd b(m * m);
  auto ring = [&](std::size_t a, std::size_t c) {
    if (c == 0) return 0.5;
    if (c == n - 1) return -0.5;
    if (a == 0) return std::sin(static_cast<double>(c));
    return 1.0 + 0.1 * static_cast<double>(c);
  };
  for (std::size_t i = 1; i + 1 < n; ++i)
    for (std::size_t j = 1; j + 1 < n; ++j) {
      const auto row = static_cast<Eigen::Index>((i - 1) * m + (j - 1));
      A(row, row) = 4.0 / (h * h);
      b(row) = f.at(i * n + j);
      const std::pair<std::size_t, std::size_t> nbs[] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (auto [a, c] : nbs) {
        if (a == 0 || c == 0 || a == n - 1 || c == n - 1) {
          b(row) += ring(a, c) / (h * h);
        } else {
          A(row, static_cast<Eigen::Index>((a - 1) * m + (c - 1))) = -1.0 / (h * h);
        }
      }
    }
  const Eigen::VectorXd x = A.partialPivLu().solve(b);
  double cg_err = 0.0;
  for (std::size_t i = 1; i + 1 < n; ++i)
    for (std::size_t j = 1; j + 1 < n; ++j)
      cg_err = std::max(cg_err, std::abs(u.at(i * n + j) - x(static_cast<Eigen::Index>((i - 1) * m + j - 1))));

  // manufactured solution at two resolutions, C = 1
  auto manufactured = [](std::size_t k) {
    const double hh = 1.0 / static_cast<double>(k - 1);
    const double pi = std::numbers::pi;
    std::vector<double> src(k * k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        src[i * k + j] = 2 * pi * pi * std::sin(pi * static_cast<double>(j) * hh) * std::sin(pi * static_cast<double>(i) * hh);
    Tensor sol = solve_poisson_fd(Tensor::from({1, 1, k, k}, src), poisson_boundary(k, k, 10.0));
    double err = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        err = std::max(err, std::abs(sol.at(i * k + j) - 10.0 -
                                     std::sin(pi * static_cast<double>(j) * hh) * std::sin(pi * static_cast<double>(i) * hh)));
    return err / (hh * hh);
  };
  const double c1 = manufactured(17), c2 = manufactured(33);

  // Darcy flux through every vertical cut
  const auto d = gen_darcy_dataset(GrfSpec{1.0, 0.25, 64, 32, 32}, {2, 0, 0}, 5);
  const std::size_t nd = 32;
  const double hd = 1.0 / 31.0;
  double flux_err = 0.0;
  for (const auto& s : d.train) {
    std::vector<double> flux(nd - 1, 0.0);
    for (std::size_t j = 0; j + 1 < nd; ++j)
      for (std::size_t i = 0; i < nd; ++i) {
        const double height = (i == 0 || i == nd - 1) ? 0.5 * hd : hd;
        const std::size_t p = i * nd + j;
        flux[j] += harmonic_mean(s.input.at(p), s.input.at(p + 1)) * (s.reference.at(p) - s.reference.at(p + 1)) / hd * height;
      }
    for (double fl : flux) flux_err = std::max(flux_err, std::abs(fl - flux[0]));
  }
  const bool pass = cg_err < 1e-6 && c1 < 1.0 && c2 < 1.0 && flux_err < 1e-8;
  return {pass, "CG vs LU " + fmt("%.1e", cg_err) + "; max err/h^2 " + fmt("%.3f", c1) + ", " + fmt("%.3f", c2) +
                    " (C = 1); Darcy flux imbalance " + fmt("%.1e", flux_err)};
}

// ---------------------------------------------------------------------------
// 5. KL / GRF

double grf_kernel(const GrfSpec& s, std::size_t p, std::size_t q) {
  auto coord = [](std::size_t idx, std::size_t n) { return n > 1 ? static_cast<double>(idx) / static_cast<double>(n - 1) : 0.0; };
  const double dx = coord(p % s.w, s.w) - coord(q % s.w, s.w);
  const double dy = coord(p / s.w, s.h) - coord(q / s.w, s.h);
  return s.sigma0 * s.sigma0 * std::exp(-(dx * dx + dy * dy) / (s.length_scale * s.length_scale));
}

Outcome kl_grf() {
  GrfSpec spec{1.0, 0.5, 10, 30, 30};
  const auto kl = kl_expansion(spec);
  const std::size_t pts = spec.h * spec.w;
  double ortho = 0.0;
  for (std::size_t a = 0; a < kl.n_modes(); ++a)
    for (std::size_t b = 0; b < kl.n_modes(); ++b) {
      double dot = 0.0;
      for (std::size_t p = 0; p < pts; ++p) dot += kl.mode(a)[p] * kl.mode(b)[p];
      ortho = std::max(ortho, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }

  GrfSpec full{0.8, 0.5, 30, 6, 5};
  const auto klf = kl_expansion(full);
  double frob = 0.0;
  for (std::size_t p = 0; p < 30; ++p)
    for (std::size_t q = 0; q < 30; ++q) {
      double c = 0.0;
      for (std::size_t m = 0; m < 30; ++m) c += klf.eigenvalues[m] * klf.mode(m)[p] * klf.mode(m)[q];
      frob += std::pow(c - grf_kernel(full, p, q), 2);
    }
  frob = std::sqrt(frob);

  Rng rng(7);
  std::vector<double> sum2(pts, 0.0);
  for (int k = 0; k < 10000; ++k) {
    Tensor field = sample_grf(kl, rng);
    for (std::size_t p = 0; p < pts; ++p) sum2[p] += field.at(p) * field.at(p);
  }
  const auto var = grf_variance(kl);
  double mc = 0.0;
  for (std::size_t p = 0; p < pts; ++p) mc = std::max(mc, std::abs(sum2[p] / 10000.0 - var[p]) / var[p]);
  return {ortho < 1e-10 && frob < 1e-8 && mc < 0.05,
          "orthonormality " + fmt("%.1e", ortho) + ", covariance Frobenius " + fmt("%.1e", frob) +
              ", MC variance max rel dev " + fmt("%.3f", mc)};
}

// ---------------------------------------------------------------------------
// 6. heat annulus

Outcome heat_end_to_end(const Settings& set) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg;
  cfg.dataset = DatasetSpec::defaults(PdeKind::heat_annulus);
  cfg.space = SpaceKind::cnn_stack;
  cfg.seed = 0;
  cfg.training.epochs = default_epochs(PdeKind::heat_annulus);
  cfg.training.batch_size = 2;
  cfg.loss_search.budget = set.c6_budget;
  cfg.loss_search.initial_random = set.c6_initial;
  cfg.loss_search.epochs = set.c6_trial_epochs;
  cfg.loss_search.default_networks = set.c6_networks;
  ExperimentData data(generate_dataset(cfg.dataset));

  const SearchSpace space = SearchSpace::make(SpaceKind::cnn_stack);
  const ArchGenome net_genome(space.slots.size(), 0);
  auto final_test = [&](const LossGenome& g) {
    LossEvaluator loss(g, PdeKind::heat_annulus);
    Network net = Network::build(space, net_genome, network_options(data, derive_seed(cfg.seed, "final-network")));
    TrainResult r = train(net, loss, data.train(), data.val(), cfg.training, Metric::relative_l2,
                          derive_seed(cfg.seed, "final-training"));
    if (r.status == TrainStatus::diverged) return std::nan("");
    return evaluate(net, loss, data.test(FinalEvaluation::open()), Metric::relative_l2);
  };

  const double hard = final_test(LossGenome::hard_baseline());
  const double vanilla = final_test(LossGenome::vanilla());
  LossSearchResult search = run_loss_stage(data, cfg);
  const double searched = final_test(search.best);
  std::printf("    searched loss %s\n", search.best.key().c_str());
  const bool pass = hard < 0.1 && searched <= 0.5 * vanilla;
  return {pass, "test rel L2: hard " + fmt("%.4f", hard) + ", vanilla " + fmt("%.4f", vanilla) + ", searched " +
                    fmt("%.4f", searched) + " (ratio " + fmt("%.3f", searched / vanilla) + "), " +
                    fmt("%.0f", seconds_since(t0)) + " s"};
}

// ---------------------------------------------------------------------------
// 7. Poisson default UNet

Outcome poisson_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentData data(generate_dataset(DatasetSpec::defaults(PdeKind::poisson)));
  const SearchSpace space = SearchSpace::make(SpaceKind::unet_entire);
  Network net = Network::build(space, ArchGenome(space.slots.size(), 0), network_options(data, 7));
  LossEvaluator loss(LossGenome::hard_baseline(), PdeKind::poisson);
  TrainingConfig tc;
  tc.epochs = default_epochs(PdeKind::poisson);
  tc.batch_size = 32;
  TrainResult r = train(net, loss, data.train(), data.val(), tc, Metric::relative_l2, 7);
  if (r.status == TrainStatus::diverged) return {false, "training diverged: " + r.message};
  const double val = r.trace.back().val_metric;
  return {val < 0.05, "validation rel L2 " + fmt("%.5f", val) + " after " + std::to_string(r.trace.size()) +
                          " epochs, " + fmt("%.0f", seconds_since(t0)) + " s"};
}

// ---------------------------------------------------------------------------
// 8. BO engine

Outcome bo_engine() {
  LossSpace space;
  const auto genomes = space.enumerate();
  std::vector<std::vector<double>> enc;
  for (const auto& g : genomes) enc.push_back(space.encode(g));
  std::vector<std::size_t> needed;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t planted = std::uniform_int_distribution<std::size_t>(0, genomes.size() - 1)(rng);
    std::vector<bool> taken(genomes.size(), false);
    std::vector<std::vector<double>> ox;
    std::vector<double> oy;
    std::size_t evals = 0;
    while (true) {
      const std::size_t pick = evals < 8 ? std::uniform_int_distribution<std::size_t>(0, genomes.size() - 1)(rng)
                                         : bo_suggest(enc, taken, ox, oy, rng);
      if (taken[pick]) continue;
      taken[pick] = true;
      ++evals;
      double dist = 0.0;
      for (std::size_t k = 0; k < enc[pick].size(); ++k) dist += std::pow(enc[pick][k] - enc[planted][k], 2);
      ox.push_back(enc[pick]);
      oy.push_back(dist);
      if (pick == planted || evals >= genomes.size()) break;
    }
    needed.push_back(evals);
  }
  std::sort(needed.begin(), needed.end());
  const double median = 0.5 * static_cast<double>(needed[9] + needed[10]);

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t incumbent_checks = 0, wrongly_stopped = 0;
  for (int ledger = 0; ledger < 100; ++ledger) {
    const std::size_t epochs = 10;
    std::vector<std::vector<double>> completed(1 + ledger % 6);
    for (auto& t : completed) {
      t.resize(epochs);
      for (double& v : t) v = u(rng);
    }
    std::vector<double> trace;
    for (std::size_t e = 0; e < epochs; ++e) {
      trace.push_back(u(rng));
      const double best = *std::min_element(trace.begin(), trace.end());
      bool incumbent = true;
      for (const auto& t : completed)
        incumbent = incumbent && best <= *std::min_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(e + 1));
      if (!incumbent) continue;
      ++incumbent_checks;
      wrongly_stopped += median_stop_check(trace, completed, epochs);
    }
  }
  const double limit = 0.3 * static_cast<double>(genomes.size());
  return {median <= limit && wrongly_stopped == 0 && incumbent_checks > 0,
          "median " + fmt("%.1f", median) + " of " + std::to_string(genomes.size()) + " evaluations (limit " +
              fmt("%.1f", limit) + "); incumbent stopped " + std::to_string(wrongly_stopped) + " of " +
              std::to_string(incumbent_checks) + " checks"};
}

// ---------------------------------------------------------------------------
// 9. REINFORCE bandit

Outcome reinforce_bandit() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> best;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ControllerConfig cfg;
    cfg.seed = seed;
    Controller c({2}, cfg);
    Rng rng(seed + 100);
    for (int step = 0; step < 200; ++step) {
      auto s = c.sample(rng);
      c.update(s.genome, s.genome[0] == 0 ? 1.0 : 0.1);
    }
    best.push_back(c.probabilities({0})[0][0]);
  }
  std::sort(best.begin(), best.end());
  const double median = 0.5 * (best[9] + best[10]);
  const double secs = seconds_since(t0);
  return {median > 0.9 && secs < 10.0,
          "median best-arm probability " + fmt("%.4f", median) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 10. DARTS

Outcome darts_planted() {
  const SearchSpace s =
      SearchSpace::chain({{"op", {OpKind::maxpool3, OpKind::conv3, OpKind::identity, OpKind::avgpool3}}}, 1);
  Network net = Network::supernet(s, {});
  std::mt19937_64 rng(8);
  Tensor xt = random_tensor({4, 1, 8, 8}, rng), xv = random_tensor({4, 1, 8, 8}, rng);
  ArchTask task;
  task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(xt), xt); };
  task.val_loss = [&](const Forward& f, std::size_t) { return mse(f(xv), xv); };
  DartsConfig cfg;
  cfg.steps = 200;
  auto res = darts_search(net, task, cfg);
  return {res.genome == ArchGenome{2} && res.max_normalization_error < 1e-9,
          "argmax alpha selects " + std::string(to_string(s.slots[0].candidates[res.genome[0]])) +
              ", max normalization error " + fmt("%.1e", res.max_normalization_error)};
}

// ---------------------------------------------------------------------------
// 11. ENAS isolation

Outcome enas_isolation() {
  std::size_t untouched_changed = 0, untouched = 0, active_changed = 0;
  for (SpaceKind kind : {SpaceKind::unet_cell, SpaceKind::unet_entire, SpaceKind::cnn_stack}) {
    const SearchSpace s = SearchSpace::make(kind, true);
    Network super = Network::supernet(s, {});
    std::mt19937_64 rng(10);
    Tensor x = random_tensor({1, 1, 16, 16}, rng);
    ArchTask task;
    task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(x), x); };
    ArchGenome g;
    for (std::size_t k : s.slot_sizes()) g.push_back(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
    const auto all = super.parameters();
    std::vector<std::vector<double>> before;
    for (const auto& p : all) before.emplace_back(p.data().begin(), p.data().end());
    const auto active = super.parameters(g);
    AdamState opt;
    enas_child_step(super, g, task, opt, 0);
    for (std::size_t i = 0; i < all.size(); ++i) {
      const bool is_active = std::any_of(active.begin(), active.end(), [&](const Tensor& t) { return t.impl() == all[i].impl(); });
      const bool same = std::equal(before[i].begin(), before[i].end(), all[i].data().begin());
      if (is_active) {
        active_changed += !same;
      } else {
        ++untouched;
        untouched_changed += !same;
      }
    }
  }
  return {untouched_changed == 0 && active_changed > 0 && untouched > 0,
          std::to_string(untouched) + " inactive tensors bitwise unchanged, " + std::to_string(active_changed) +
              " active tensors updated"};
}

// ---------------------------------------------------------------------------
// 12. determinism

Outcome determinism(const Settings& set) {
  ExperimentConfig cfg;
  cfg.dataset = DatasetSpec::defaults(PdeKind::heat_annulus);
  cfg.seed = 12;
  cfg.space = SpaceKind::cnn_stack;
  cfg.loss_search.budget = 3;
  cfg.loss_search.initial_random = 2;
  cfg.loss_search.epochs = 5;
  cfg.loss_search.default_networks = 2;
  cfg.arch_search.budget = 3;
  cfg.arch_search.epochs = 5;
  cfg.training.epochs = 40;
  cfg.training.batch_size = 2;
  cfg.output_dir = set.out / "determinism" / "first";
  fs::remove_all(set.out / "determinism");
  PipelineResult a = two_stage_pipeline(cfg);
  PipelineResult b = rerun_from_manifest(cfg.output_dir / "manifest.json", set.out / "determinism" / "rerun");
  const bool same = std::memcmp(&a.report.test, &b.report.test, sizeof(double)) == 0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "test metric %a vs rerun %a", a.report.test, b.report.test);
  return {same, buf};
}

// ---------------------------------------------------------------------------
// 13. search-space comparison

Outcome space_comparison(const Settings& set) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentData data(generate_dataset(DatasetSpec::defaults(PdeKind::poisson)));
  TrainingConfig tc;
  tc.epochs = set.c13_epochs;
  tc.batch_size = 32;
  std::string csv = "dataset,search_space,relative_l2\n";
  std::map<SpaceKind, double> best;
  for (SpaceKind kind : {SpaceKind::unet_entire, SpaceKind::unet_cell}) {
    SearchScope scope;
    const SearchSpace space = SearchSpace::make(kind);
    MultiTrialConfig mc;
    mc.budget = set.c13_archs;
    mc.seed = derive_seed(13, "arch-search");
    mc.controller.seed = derive_seed(13, "controller");
    auto trainer = make_arch_trainer(data, LossGenome::hard_baseline(), space, tc, Metric::relative_l2,
                                     derive_seed(13, "arch-trials"));
    ArchSearchResult r = multi_trial_search(space, trainer, mc);
    best[kind] = r.best_error;
    char row[128];
    std::snprintf(row, sizeof row, "poisson,%s,%.6g\n", std::string(to_string(kind)).c_str(), r.best_error);
    csv += row;
  }
  const fs::path path = set.out / "search_space_comparison.csv";
  write_text(path, csv);
  const double e = best[SpaceKind::unet_entire], c = best[SpaceKind::unet_cell];
  return {std::isfinite(e) && std::isfinite(c),
          "entire " + fmt("%.5f", e) + ", cell " + fmt("%.5f", c) + (e <= c ? " (entire <= cell)" : " (entire > cell)") +
              ", " + std::to_string(set.c13_archs) + " architectures x " + std::to_string(set.c13_epochs) +
              " epochs per space, " + fmt("%.0f", seconds_since(t0)) + " s; wrote " + path.string()};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  Settings set;
  std::vector<int> only;
  std::string out = set.out.string();
  app.add_option("--criteria", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--out", out, "directory for run artifacts");
  app.add_option("--c6-budget", set.c6_budget, "loss-search trials for criterion 6");
  app.add_option("--c6-trial-epochs", set.c6_trial_epochs, "epochs per loss-search trial for criterion 6");
  app.add_option("--c13-archs", set.c13_archs, "architectures per space for criterion 13");
  app.add_option("--c13-epochs", set.c13_epochs, "epochs per architecture for criterion 13");
  CLI11_PARSE(app, argc, argv);
  set.out = out;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"autodiff gradcheck suite", autodiff_suite},
      {"stencil exactness and order", stencil_exactness},
      {"vanilla-loss equivalence", vanilla_equivalence},
      {"reference solvers", reference_solvers},
      {"KL expansion and GRF sampling", kl_grf},
      {"heat annulus end to end", [&] { return heat_end_to_end(set); }},
      {"Poisson default UNet end to end", poisson_end_to_end},
      {"BO engine and median stopping", bo_engine},
      {"REINFORCE two-armed bandit", reinforce_bandit},
      {"DARTS planted identity", darts_planted},
      {"ENAS isolation", enas_isolation},
      {"pipeline determinism", [&] { return determinism(set); }},
      {"search-space comparison", [&] { return space_comparison(set); }},
  };

  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d: %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
