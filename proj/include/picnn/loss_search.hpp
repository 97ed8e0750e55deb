#pragma once
/**
 * @file loss_search.hpp
 * @brief Bayesian optimisation over loss genomes with median early stopping.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "picnn/loss.hpp"
#include "picnn/util.hpp"

namespace picnn {

/// Zero-mean GP with a Matern-5/2 kernel on standardised targets. The length
/// scale is picked from a grid by marginal likelihood.
class GaussianProcess {
 public:
  explicit GaussianProcess(double noise = 1e-6,
                           std::vector<double> length_scales = {0.25, 0.5, 1.0, 2.0, 4.0, 8.0});

  /// Throws SolverError if no length scale gives a positive definite system.
  void fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y);

  struct Prediction {
    double mean = 0.0, variance = 0.0;
  };
  Prediction predict(std::span<const double> x) const;

  double length_scale() const { return length_scale_; }
  double log_marginal_likelihood() const { return lml_; }

 private:
  double kernel(std::span<const double> a, std::span<const double> b, double ell) const;

  double noise_;
  std::vector<double> grid_;
  std::vector<std::vector<double>> x_;
  Eigen::VectorXd alpha_;
  Eigen::MatrixXd chol_l_;
  double y_mean_ = 0.0, y_scale_ = 1.0, length_scale_ = 1.0, lml_ = 0.0;
};

/// Expected improvement below `best` for a minimised objective. Zero when the
/// variance is zero and the mean is not below `best`.
double expected_improvement(double mean, double variance, double best);

/// Index into `candidates` with the highest EI among those not flagged in
/// `taken`. Falls back to a uniformly random free candidate when the GP fit
/// fails or there are fewer than two observations. Returns candidates.size()
/// when every candidate is taken.
std::size_t bo_suggest(const std::vector<std::vector<double>>& candidates, const std::vector<bool>& taken,
                       const std::vector<std::vector<double>>& observed_x, const std::vector<double>& observed_y,
                       Rng& rng);

struct MedianStopConfig {
  bool enabled = true;
  double grace_fraction = 0.1;    // no stopping before this share of the epochs
  std::size_t min_completed = 1;  // completed trials needed before stopping anyone
};

/// True iff the running trial's best-so-far (minimum of `trace`) is strictly
/// worse than the median over `completed` of their running averages up to the
/// same epoch.
bool median_stop_check(std::span<const double> trace, const std::vector<std::vector<double>>& completed,
                       std::size_t total_epochs, const MedianStopConfig& config = {});

enum class TrialStatus { running, completed, stopped, failed };
std::string_view to_string(TrialStatus s);

struct TrialRecord {
  std::size_t index = 0;
  LossGenome genome;
  TrialStatus status = TrialStatus::running;
  double error = 0.0;          // final validation error
  std::vector<double> trace;   // validation error per reported epoch
  double seconds = 0.0;
  std::string message;         // failure reason
};

/// Handed to a trainer so it can report per-epoch validation error.
class TrialMonitor {
 public:
  virtual ~TrialMonitor() = default;
  /// Records the metric; returns true if the trial should stop now.
  virtual bool report(std::size_t epoch, double metric) = 0;
};

/// Trains with a genome and returns the final validation error. Throwing or
/// returning a non-finite value marks the trial failed.
using LossTrainer = std::function<double(const LossGenome&, TrialMonitor&)>;

struct LossSearchConfig {
  LossSpace space;
  std::size_t budget = 20;
  std::size_t workers = 1;
  std::size_t initial_random = 8;
  std::uint64_t seed = 0;
  std::size_t total_epochs = 1;  // epochs per trial, for the grace period
  MedianStopConfig median_stop;
};

void to_json(nlohmann::json& j, const LossSearchConfig& c);
void from_json(const nlohmann::json& j, LossSearchConfig& c);

struct LossSearchResult {
  LossGenome best;
  double best_error = 0.0;
  std::vector<TrialRecord> trials;  // in issue order
};

/// Runs up to `budget` trials and returns the completed trial with the lowest
/// validation error. With one worker the trial sequence depends only on the
/// seed and the trainer. Throws SearchError if no trial completes.
LossSearchResult run_loss_search(const LossSearchConfig& config, const LossTrainer& trainer);

/// CSV with one row per trial: index, status, error, epochs, seconds, genome key.
std::string trials_csv(const std::vector<TrialRecord>& trials);

}  // namespace picnn
