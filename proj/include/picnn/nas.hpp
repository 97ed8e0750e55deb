#pragma once
/**
 * @file nas.hpp
 * @brief Architecture search strategies: REINFORCE controller (multi-trial),
 * ENAS weight sharing and first-order DARTS.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "picnn/arch.hpp"
#include "picnn/optim.hpp"
#include "picnn/util.hpp"

namespace picnn {

/// 1/e, with e <= 0 clamped to `epsilon` and non-finite errors mapped to 0.
double reward_from_error(double error, double epsilon = 1e-8);

struct ControllerConfig {
  std::size_t hidden = 64;
  std::size_t embed = 32;
  double lr = 0.05;
  double baseline_decay = 0.9;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ControllerConfig& c);
void from_json(const nlohmann::json& j, ControllerConfig& c);

/// Autoregressive LSTM policy over the slots of a space. Each step feeds the
/// embedding of the previous choice; heads start at zero (uniform policy).
class Controller {
 public:
  Controller(std::vector<std::size_t> slot_sizes, ControllerConfig config = {});

  struct Sample {
    ArchGenome genome;
    std::vector<double> log_probs;  // per slot
  };
  Sample sample(Rng& rng) const;
  /// Greedy decode: the most probable choice at every step.
  ArchGenome argmax() const;
  /// Per-slot probabilities along the path of `genome`.
  std::vector<std::vector<double>> probabilities(const ArchGenome& genome) const;
  /// Sum of log pi(a_t | a_<t) as a differentiable scalar.
  Tensor log_prob(const ArchGenome& genome) const;

  /// One SGD ascent step on (reward - baseline) * log pi(genome), then the
  /// baseline moves toward the reward. The first reward seeds the baseline.
  /// Returns the advantage used.
  double update(const ArchGenome& genome, double reward);

  double baseline() const { return baseline_; }
  bool has_baseline() const { return has_baseline_; }
  std::vector<Tensor> parameters() const;
  const std::vector<std::size_t>& slot_sizes() const { return sizes_; }

 private:
  // Runs the recurrent cell along `genome` (or samples when rng is set).
  std::vector<Tensor> logits_along(ArchGenome& genome, Rng* rng, bool greedy) const;

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> token_offset_;
  ControllerConfig config_;
  Tensor embed_, wx_, wh_, bias_;
  std::vector<Tensor> head_w_, head_b_;
  double baseline_ = 0.0;
  bool has_baseline_ = false;
};

// ---------------------------------------------------------------------------
// multi-trial

enum class ArchTrialStatus { completed, diverged };

struct ArchTrial {
  std::size_t index = 0;
  ArchGenome genome;
  double error = 0.0;
  double reward = 0.0;
  ArchTrialStatus status = ArchTrialStatus::completed;
  std::string message;
  double seconds = 0.0;
};

/// Trains a genome from scratch and returns its validation error.
using ArchTrainer = std::function<double(const ArchGenome&)>;

struct MultiTrialConfig {
  std::size_t budget = 20;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  double reward_epsilon = 1e-8;
  ControllerConfig controller;
};

struct ArchSearchResult {
  ArchGenome best;
  double best_error = 0.0;
  std::vector<ArchTrial> trials;
  std::vector<double> trace;  // per step: reward (rl), validation loss (darts) or mean reward (enas)
};

/// Sample, train, reward, update; returns the highest-reward genome. With more
/// than one worker, updates happen in completion order.
ArchSearchResult multi_trial_search(const SearchSpace& space, const ArchTrainer& trainer,
                                    const MultiTrialConfig& config);

std::string arch_trials_csv(const SearchSpace& space, const std::vector<ArchTrial>& trials);

// ---------------------------------------------------------------------------
// one-shot

using Forward = std::function<Tensor(const Tensor&)>;

/// Losses of a model given as a forward function.
struct ArchTask {
  std::function<Tensor(const Forward&, std::size_t step)> train_loss;  // one minibatch
  std::function<Tensor(const Forward&, std::size_t step)> val_loss;    // differentiable
  std::function<double(const Forward&)> val_error;                     // metric for rewards
};

/// Softmax over each slot's architecture weights.
std::vector<Tensor> darts_probabilities(const std::vector<Tensor>& alpha);

struct DartsConfig {
  std::size_t steps = 200;
  double weight_lr = 1e-3;
  double alpha_lr = 3e-3;
};

struct DartsResult {
  ArchGenome genome;
  std::vector<std::vector<double>> alpha;
  std::vector<double> val_trace;
  double max_normalization_error = 0.0;  // max |sum_k P_k - 1| seen
};

/// Alternates a weight step on the training loss and an architecture step on
/// the validation loss (first order); returns the per-slot argmax.
DartsResult darts_search(Network& supernet, const ArchTask& task, const DartsConfig& config,
                         std::vector<Tensor>* alpha_io = nullptr);

struct EnasConfig {
  std::size_t iterations = 100;
  std::size_t child_steps = 1;        // shared-weight steps per iteration
  std::size_t controller_samples = 2; // rewards per controller phase
  double weight_lr = 1e-3;
  std::uint64_t seed = 0;
  ControllerConfig controller;
};

/// One shared-weight training step of the subgraph a genome activates; only
/// those parameters (and their optimizer moments) change.
void enas_child_step(Network& supernet, const ArchGenome& genome, const ArchTask& task, AdamState& opt,
                     std::size_t step);

ArchSearchResult enas_search(Network& supernet, const ArchTask& task, const EnasConfig& config);

}  // namespace picnn
