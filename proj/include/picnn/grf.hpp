#pragma once
/**
 * @file grf.hpp
 * @brief Gaussian random fields on [0,1]^2 via a truncated Karhunen-Loeve expansion.
 *
 * Covariance: sigma0^2 exp(-|x - x0|^2 / l^2) between grid nodes
 * x = (j / (W-1), i / (H-1)). The kernel factorizes over the two axes, so the
 * eigenpairs of the H*W covariance are products of the eigenpairs of the two
 * 1-D covariances.
 */

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "picnn/tensor.hpp"
#include "picnn/util.hpp"

namespace picnn {

struct GrfSpec {
  double sigma0 = 1.0;
  double length_scale = 0.5;
  std::size_t n_modes = 10;
  std::size_t h = 30, w = 30;

  /// Throws ConfigError for non-positive scales or n_modes outside [1, H*W].
  void validate() const;
};

void to_json(nlohmann::json& j, const GrfSpec& s);
void from_json(const nlohmann::json& j, GrfSpec& s);

struct KlExpansion {
  std::size_t h = 0, w = 0;
  std::vector<double> eigenvalues;  // nonincreasing, nonnegative
  std::vector<double> modes;        // n_modes x (H*W), row-major; each row has unit norm

  std::size_t n_modes() const { return eigenvalues.size(); }
  std::span<const double> mode(std::size_t k) const { return {modes.data() + k * h * w, h * w}; }
};

/// Throws SolverError if an eigen-decomposition fails.
KlExpansion kl_expansion(const GrfSpec& spec);

/// Field sum_i sqrt(lambda_i) phi_i omega_i for given coefficients, as [1,1,H,W].
Tensor grf_field(const KlExpansion& kl, std::span<const double> omega);

/// Draws omega ~ N(0, 1) from `rng`.
Tensor sample_grf(const KlExpansion& kl, Rng& rng);
Tensor sample_grf(const GrfSpec& spec, std::uint64_t seed);

/// Pointwise variance sum_i lambda_i phi_i(x)^2 of the truncated field.
std::vector<double> grf_variance(const KlExpansion& kl);

}  // namespace picnn
