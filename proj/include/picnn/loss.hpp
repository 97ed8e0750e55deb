#pragma once
/**
 * @file loss.hpp
 * @brief Loss genomes and the physics-driven loss they assemble.
 *
 * A genome selects the constraint mode, derivative kernel, unary operator on
 * the residue, optional residual-gradient terms, a residue-based weighting
 * operator, optional all-ones addition and an optional boundary penalty.
 */

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "picnn/boundary.hpp"
#include "picnn/datasets.hpp"
#include "picnn/residual.hpp"
#include "picnn/stencil.hpp"

namespace picnn {

enum class WeightOpKind { topn, normalize, pointwise_grad, unitize };

std::string_view to_string(WeightOpKind k);
WeightOpKind weight_op_from_string(std::string_view name);

struct WeightOp {
  WeightOpKind kind = WeightOpKind::unitize;
  std::size_t topn_count = 0;  // 0 selects 1% of the residual points (at least 1)
  double eta1 = 1.0;           // normalize scale
  double rho = 0.01;           // pointwise_grad ascent rate
};

struct LossGenome {
  ConstraintMode constraint = ConstraintMode::soft;
  KernelFamily kernel = KernelFamily::central2;
  UnaryOp unary = UnaryOp::square;
  bool gradient_enhance = false;
  WeightOp weight;
  bool add_ones = false;
  bool boundary_loss = true;
  double lambda_r = 1.0, lambda_b = 1.0, lambda_g = 0.1;

  /// Soft constraint, central2, square, unitize, boundary penalty: plain MSE.
  static LossGenome vanilla();
  /// Hard constraint, central2, square, unitize, no penalty.
  static LossGenome hard_baseline();

  /// Copy with parameters of inactive options reset, so equal behaviour gives equal keys.
  LossGenome canonical() const;
  /// Canonical compact JSON, used as an identity key.
  std::string key() const;
  /// Throws ConfigError on negative weights or out-of-range operator parameters.
  void validate() const;
};

void to_json(nlohmann::json& j, const LossGenome& g);
void from_json(const nlohmann::json& j, LossGenome& g);
bool operator==(const LossGenome& a, const LossGenome& b);

/// Options the loss search may choose from.
struct LossSpace {
  std::vector<ConstraintMode> constraints{ConstraintMode::soft, ConstraintMode::hard, ConstraintMode::combined};
  std::vector<KernelFamily> kernels{KernelFamily::sobel3, KernelFamily::sobel5, KernelFamily::central2,
                                    KernelFamily::central4};
  std::vector<UnaryOp> unaries{UnaryOp::abs, UnaryOp::square, UnaryOp::identity};
  std::vector<double> lambda_g{0.01, 0.1};  // gradient enhancement off, or on with one of these
  std::vector<double> eta1{0.5, 1.0, 2.0};
  std::vector<double> rho{0.01, 0.1};
  bool topn = true, unitize = true;
  std::vector<double> lambda_b{1.0, 10.0};  // boundary penalty off, or on with one of these

  /// Every distinct genome of the space, in a fixed order.
  std::vector<LossGenome> enumerate() const;
  /// Fixed-length numeric encoding: one-hot categories plus scaled numeric options.
  std::vector<double> encode(const LossGenome& g) const;
};

void to_json(nlohmann::json& j, const LossSpace& s);
void from_json(const nlohmann::json& j, LossSpace& s);

/// Per-training-point weights, keyed by training-sample index.
struct WeightState {
  enum class Mode { cumulative, direct };
  Mode mode = Mode::direct;
  std::unordered_map<std::size_t, std::vector<double>> weights;

  static Mode mode_for(WeightOpKind kind);
  /// Weights of one sample, created with `initial` on first use.
  std::vector<double>& of(std::size_t sample, std::size_t size, double initial);
};

/// Adds 1 at the N largest |residue| entries among mask > 0 points.
/// Ties at the N-th value go to the lower row-major index. Throws
/// std::out_of_range unless 1 <= N <= number of masked points.
void weight_update_topn(std::span<const double> residue, std::span<const double> mask,
                        std::vector<double>& weights, std::size_t n);

/// eta1 * (|r| - min|r|) / (max|r| - min|r|) over masked points; 0 elsewhere
/// and everywhere when the residue is constant.
std::vector<double> weight_update_normalize(std::span<const double> residue, std::span<const double> mask,
                                            double eta1);

/// Gradient ascent w += rho * dL/dw.
void weight_update_pointwise_grad(std::span<const double> dloss_dw, std::vector<double>& weights, double rho);

/// lambda_g * sum over axes of the mean unary(stencil derivative of the
/// residual), averaged over points whose whole stencil lies in the mask.
/// `mask` may be undefined (all points valid).
Tensor gradient_enhanced_terms(const Tensor& residual, const Tensor& mask, const StencilSet& stencils,
                               UnaryOp unary, double lambda_g);

struct LossTerms {
  Tensor total;  // scalar, differentiable
  double residual = 0.0, boundary = 0.0, gradient = 0.0;
};

/// Executable loss for one genome and problem.
class LossEvaluator {
 public:
  LossEvaluator(LossGenome genome, PdeKind problem);

  /// Loss of a batch of network outputs [N,1,H,W]. `ids` identify the
  /// training samples (weights persist per id); pass an empty span for
  /// evaluation-only calls, which use unit weights and leave state untouched.
  LossTerms operator()(const Tensor& output, std::span<const GridSample* const> batch,
                       std::span<const std::size_t> ids, WeightState& state) const;

  /// Network output with the genome's constraint applied (hard modes pin the
  /// boundary), for prediction.
  Tensor constrained(const Tensor& output, const GridSample& sample) const;

  const LossGenome& genome() const { return genome_; }
  PdeKind problem() const { return problem_; }

 private:
  LossGenome genome_;
  PdeKind problem_;
};

/// Number of residual points the topN operator selects from a mask.
std::size_t topn_count(const WeightOp& op, std::size_t masked_points);

}  // namespace picnn
