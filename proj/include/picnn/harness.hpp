#pragma once
/**
 * @file harness.hpp
 * @brief Experiment orchestration: metrics, training, search adapters, the
 * two-stage pipeline and report files.
 */

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "picnn/arch.hpp"
#include "picnn/datasets.hpp"
#include "picnn/loss.hpp"
#include "picnn/loss_search.hpp"
#include "picnn/nas.hpp"

namespace picnn {

// ---------------------------------------------------------------------------
// metrics

/// ||pred - truth|| / ||truth|| over all points. Throws ShapeError on a shape
/// mismatch and std::domain_error when truth is zero.
double relative_l2(const Tensor& pred, const Tensor& truth);
/// Mean absolute deviation. Throws ShapeError on a shape mismatch.
double mae(const Tensor& pred, const Tensor& truth);

enum class Metric { relative_l2, mae };
std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view name);
double metric_value(Metric m, const Tensor& pred, const Tensor& truth);

// ---------------------------------------------------------------------------
// split access

struct TrainSplit {};
struct ValSplit {};
struct TestSplit {};

/// Read-only view of one split, tagged by type so that search code, which
/// only ever receives train and validation views, cannot name the test split.
template <class Tag>
class SplitRef {
 public:
  std::span<const GridSample> samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }

 private:
  explicit SplitRef(std::span<const GridSample> s) : samples_(s) {}
  std::span<const GridSample> samples_;
  friend class ExperimentData;
};

/// Permission to read the test split. Opening one while a search is running
/// throws std::logic_error.
class FinalEvaluation {
 public:
  static FinalEvaluation open();

 private:
  FinalEvaluation() = default;
};

/// Marks a search in progress for its lifetime (see FinalEvaluation).
class SearchScope {
 public:
  SearchScope();
  ~SearchScope();
  SearchScope(const SearchScope&) = delete;
  SearchScope& operator=(const SearchScope&) = delete;
  static bool active();
};

class ExperimentData {
 public:
  explicit ExperimentData(Dataset dataset);

  SplitRef<TrainSplit> train() const { return SplitRef<TrainSplit>(dataset_.train); }
  SplitRef<ValSplit> val() const { return SplitRef<ValSplit>(dataset_.val); }
  SplitRef<TestSplit> test(const FinalEvaluation&) const { return SplitRef<TestSplit>(dataset_.test); }
  const DatasetSpec& spec() const { return dataset_.spec; }
  std::size_t in_channels() const;

 private:
  Dataset dataset_;
};

// ---------------------------------------------------------------------------
// training

struct TrainingConfig {
  std::size_t epochs = 2000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::string optimizer = "adam";
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

/// Training epochs per problem: desk-scale defaults, or the full-scale
/// budgets with `full_scale`.
std::size_t default_epochs(PdeKind problem, bool full_scale = false);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's minibatches
  double val_metric = 0.0;
};

enum class TrainStatus { completed, stopped, diverged };
std::string_view to_string(TrainStatus s);

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  std::vector<EpochRecord> trace;
  double seconds = 0.0;
  std::string message;
};

/// Epoch-at-a-time training of one network: Adam, shuffled minibatches,
/// validation metric after every epoch. Deterministic for a fixed seed.
class Trainer {
 public:
  Trainer(Network& network, LossEvaluator loss, SplitRef<TrainSplit> train, SplitRef<ValSplit> val,
          TrainingConfig config, Metric metric, std::uint64_t seed);

  /// Throws DivergenceError on a non-finite loss or parameter.
  EpochRecord epoch();
  std::size_t epochs_done() const { return done_; }

 private:
  Network* net_;
  LossEvaluator loss_;
  SplitRef<TrainSplit> train_;
  SplitRef<ValSplit> val_;
  TrainingConfig config_;
  Metric metric_;
  Rng rng_;
  AdamState adam_;
  WeightState weights_;
  std::vector<Tensor> params_;
  std::size_t done_ = 0;
};

/// Runs config.epochs epochs. `on_epoch` returning true stops early.
/// Divergence ends the run with status diverged and the trace so far.
TrainResult train(Network& network, const LossEvaluator& loss, SplitRef<TrainSplit> train_split,
                  SplitRef<ValSplit> val_split, const TrainingConfig& config, Metric metric, std::uint64_t seed,
                  const std::function<bool(const EpochRecord&)>& on_epoch = {});

/// Predictions with the loss's constraint applied, metric over every point
/// of every sample.
double evaluate(const Network& network, const LossEvaluator& loss, std::span<const GridSample> samples,
                Metric metric);
template <class Tag>
double evaluate(const Network& network, const LossEvaluator& loss, SplitRef<Tag> split, Metric metric) {
  return evaluate(network, loss, split.samples(), metric);
}

/// Flat parameter vector, in Network::parameters() order.
void save_parameters(const Network& network, const std::filesystem::path& path);
void load_parameters(Network& network, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// search adapters

/// A space plus one genome; enough to rebuild a network.
struct ArchSpec {
  SearchSpace space;
  ArchGenome genome;
};

void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

NetworkOptions network_options(const ExperimentData& data, std::uint64_t seed);

/// Networks trained under each loss candidate: the plain UNet (all first
/// choices of unet_entire) for source-field problems; for boundary-condition
/// problems `count` random genomes of `space` drawn from `seed`.
std::vector<ArchSpec> default_networks(PdeKind problem, const SearchSpace& space, std::size_t count,
                                       std::uint64_t seed);

/// Trains every default network with the candidate loss in lockstep and
/// reports the mean validation metric per epoch.
LossTrainer make_loss_trainer(const ExperimentData& data, std::vector<ArchSpec> networks,
                              const TrainingConfig& config, Metric metric, std::uint64_t seed);

/// Trains a genome of `space` from scratch; returns the final validation
/// metric. Throws DivergenceError when training diverges.
ArchTrainer make_arch_trainer(const ExperimentData& data, const LossGenome& loss, const SearchSpace& space,
                              const TrainingConfig& config, Metric metric, std::uint64_t seed);

/// Minibatch training loss, differentiable validation loss (unit weights)
/// and validation metric for the one-shot strategies.
ArchTask make_arch_task(const ExperimentData& data, const LossGenome& loss, std::size_t batch_size,
                        Metric metric, std::uint64_t seed);

// ---------------------------------------------------------------------------
// experiment

enum class ArchStrategy { rl, enas, darts };
std::string_view to_string(ArchStrategy s);
ArchStrategy arch_strategy_from_string(std::string_view name);

struct LossStageConfig {
  std::size_t budget = 8;
  std::size_t workers = 1;
  std::size_t initial_random = 8;
  std::size_t epochs = 100;            // per trial
  std::size_t default_networks = 5;    // boundary-condition problems
  bool median_stop = true;
  std::optional<LossGenome> fixed;     // skip the search and use this loss
};

struct ArchStageConfig {
  ArchStrategy strategy = ArchStrategy::rl;
  std::size_t budget = 8;   // trials (rl), iterations (enas) or steps (darts)
  std::size_t workers = 1;
  std::size_t epochs = 100;  // per rl trial
  std::optional<ArchSpec> fixed;  // skip the search and use this network
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::optional<std::filesystem::path> dataset_dir;  // load instead of generating
  std::uint64_t seed = 0;
  SpaceKind space = SpaceKind::unet_entire;
  LossStageConfig loss_search;
  ArchStageConfig arch_search;
  TrainingConfig training;
  Metric metric = Metric::relative_l2;
  std::filesystem::path output_dir = "run";

  /// Throws ConfigError (IoError for missing referenced files).
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
/// Parses and validates a config file. Throws IoError or ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Dataset of a config: loaded from dataset_dir or generated from the spec.
Dataset load_or_generate(const ExperimentConfig& config);

struct MetricsReport {
  static constexpr int kFormatVersion = 1;
  std::string problem;
  std::string metric;
  std::string status = "completed";
  double train = 0.0, val = 0.0, test = 0.0;
  std::vector<EpochRecord> trace;
  double seconds = 0.0;
  nlohmann::json loss_genome;
  nlohmann::json architecture;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

/// `epoch,train_loss,val_metric`, one row per epoch.
std::string curves_csv(const std::vector<EpochRecord>& trace);

/// Writes report.json and curves.csv into `dir`. Throws IoError.
void report_emit(const MetricsReport& report, const std::filesystem::path& dir);
MetricsReport read_report(const std::filesystem::path& dir);

/// Stage 1 alone: the configured loss search (or the fixed loss).
LossSearchResult run_loss_stage(const ExperimentData& data, const ExperimentConfig& config);

struct ArchStageResult {
  ArchSpec network;
  ArchSearchResult search;
};

/// Stage 2 alone under a frozen loss: the configured strategy (or the fixed network).
ArchStageResult run_arch_stage(const ExperimentData& data, const ExperimentConfig& config, const LossGenome& loss);

/// Stage outputs in addition to the final report.
struct PipelineResult {
  MetricsReport report;
  LossSearchResult loss;
  ArchSearchResult arch;
  ArchSpec network;
};

/// Loss search, architecture search under the frozen loss, retraining of the
/// winner and a final test evaluation. Writes dataset, stage ledgers, the
/// report and manifest.json under config.output_dir; artifacts of finished
/// stages survive a failure in a later one.
PipelineResult two_stage_pipeline(const ExperimentConfig& config);

/// Reruns the config recorded in a manifest into `output_dir`.
PipelineResult rerun_from_manifest(const std::filesystem::path& manifest, const std::filesystem::path& output_dir);

/// Writes `text` to `path`, creating parent directories. Throws IoError.
void write_text(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace picnn
