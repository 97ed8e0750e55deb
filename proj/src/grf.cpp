#include "picnn/grf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "picnn/error.hpp"

namespace picnn {

namespace {

struct Axis {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns match values
};

Axis axis_eigen(std::size_t n, double length_scale) {
  Eigen::MatrixXd c(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double step = n > 1 ? 1.0 / static_cast<double>(n - 1) : 0.0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const double d = (static_cast<double>(a) - static_cast<double>(b)) * step;
      c(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = std::exp(-d * d / (length_scale * length_scale));
    }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c);
  if (solver.info() != Eigen::Success) {
    throw SolverError("kl_expansion: eigen-decomposition of the " + std::to_string(n) +
                      "-point covariance did not converge");
  }
  Axis out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  for (Eigen::Index k = 0; k < out.vectors.cols(); ++k) {
    // fix the sign so the largest-magnitude component is positive
    Eigen::Index arg = 0;
    out.vectors.col(k).cwiseAbs().maxCoeff(&arg);
    if (out.vectors(arg, k) < 0) out.vectors.col(k) *= -1.0;
    out.values(k) = std::max(out.values(k), 0.0);
  }
  return out;
}

}  // namespace

void GrfSpec::validate() const {
  if (!(sigma0 > 0.0) || !(length_scale > 0.0)) throw ConfigError("grf: sigma0 and length_scale must be positive");
  if (h == 0 || w == 0) throw ConfigError("grf: grid must be non-empty");
  if (n_modes == 0 || n_modes > h * w) {
    throw ConfigError("grf: n_modes " + std::to_string(n_modes) + " outside [1, " + std::to_string(h * w) + "]");
  }
}

void to_json(nlohmann::json& j, const GrfSpec& s) {
  j = nlohmann::json{{"sigma0", s.sigma0}, {"length_scale", s.length_scale}, {"n_modes", s.n_modes},
                     {"h", s.h}, {"w", s.w}};
}

void from_json(const nlohmann::json& j, GrfSpec& s) {
  s.sigma0 = j.value("sigma0", s.sigma0);
  s.length_scale = j.value("length_scale", s.length_scale);
  s.n_modes = j.value("n_modes", s.n_modes);
  s.h = j.value("h", s.h);
  s.w = j.value("w", s.w);
}

KlExpansion kl_expansion(const GrfSpec& spec) {
  spec.validate();
  const Axis ay = axis_eigen(spec.h, spec.length_scale);
  const Axis ax = axis_eigen(spec.w, spec.length_scale);
  const double var = spec.sigma0 * spec.sigma0;

  std::vector<std::size_t> order(spec.h * spec.w);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto value = [&](std::size_t k) {
    return var * ay.values(static_cast<Eigen::Index>(k / spec.w)) * ax.values(static_cast<Eigen::Index>(k % spec.w));
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return value(a) > value(b); });

  KlExpansion kl;
  kl.h = spec.h;
  kl.w = spec.w;
  kl.eigenvalues.resize(spec.n_modes);
  kl.modes.resize(spec.n_modes * spec.h * spec.w);
  for (std::size_t m = 0; m < spec.n_modes; ++m) {
    const auto a = static_cast<Eigen::Index>(order[m] / spec.w);
    const auto b = static_cast<Eigen::Index>(order[m] % spec.w);
    kl.eigenvalues[m] = value(order[m]);
    double* dst = kl.modes.data() + m * spec.h * spec.w;
    for (std::size_t i = 0; i < spec.h; ++i)
      for (std::size_t j = 0; j < spec.w; ++j)
        dst[i * spec.w + j] = ay.vectors(static_cast<Eigen::Index>(i), a) * ax.vectors(static_cast<Eigen::Index>(j), b);
  }
  return kl;
}

Tensor grf_field(const KlExpansion& kl, std::span<const double> omega) {
  if (omega.size() != kl.n_modes()) {
    throw ShapeError("grf_field: " + std::to_string(omega.size()) + " coefficients for " +
                     std::to_string(kl.n_modes()) + " modes");
  }
  std::vector<double> field(kl.h * kl.w, 0.0);
  for (std::size_t m = 0; m < kl.n_modes(); ++m) {
    const double c = std::sqrt(kl.eigenvalues[m]) * omega[m];
    const auto phi = kl.mode(m);
    for (std::size_t p = 0; p < field.size(); ++p) field[p] += c * phi[p];
  }
  return Tensor::from({1, 1, kl.h, kl.w}, std::move(field));
}

Tensor sample_grf(const KlExpansion& kl, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> omega(kl.n_modes());
  for (double& o : omega) o = normal(rng);
  return grf_field(kl, omega);
}

Tensor sample_grf(const GrfSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return sample_grf(kl_expansion(spec), rng);
}

std::vector<double> grf_variance(const KlExpansion& kl) {
  std::vector<double> var(kl.h * kl.w, 0.0);
  for (std::size_t m = 0; m < kl.n_modes(); ++m) {
    const auto phi = kl.mode(m);
    for (std::size_t p = 0; p < var.size(); ++p) var[p] += kl.eigenvalues[m] * phi[p] * phi[p];
  }
  return var;
}

}  // namespace picnn
