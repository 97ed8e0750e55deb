#include "picnn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"
#include "picnn/optim.hpp"
#include "picnn/tensor_io.hpp"
#include "picnn/util.hpp"

namespace picnn {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::atomic<int> g_active_searches{0};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_or_nan(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

void check_same_shape(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("metric operands differ in shape");
}

std::vector<const GridSample*> pointers(std::span<const GridSample> samples) {
  std::vector<const GridSample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

// Metric of constrained predictions over every sample, in batches.
double evaluate_forward(const Forward& forward, const LossEvaluator& loss, std::span<const GridSample> samples,
                        Metric metric) {
  if (samples.empty()) throw ConfigError("cannot evaluate an empty split");
  NoGradGuard guard;
  constexpr std::size_t kChunk = 32;
  std::vector<Tensor> preds, truths;
  for (std::size_t b = 0; b < samples.size(); b += kChunk) {
    std::vector<Tensor> xs;
    const std::size_t end = std::min(samples.size(), b + kChunk);
    for (std::size_t i = b; i < end; ++i) xs.push_back(samples[i].input);
    Tensor y = forward(stack_batch(xs));
    for (std::size_t i = b; i < end; ++i) {
      preds.push_back(loss.constrained(slice_batch(y, i - b), samples[i]));
      truths.push_back(samples[i].reference);
    }
  }
  return metric_value(metric, stack_batch(preds), stack_batch(truths));
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// metrics

double relative_l2(const Tensor& pred, const Tensor& truth) {
  check_same_shape(pred, truth);
  auto p = pred.data();
  auto t = truth.data();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += (p[i] - t[i]) * (p[i] - t[i]);
    den += t[i] * t[i];
  }
  if (den == 0.0) throw std::domain_error("relative L2 error of a zero reference");
  return std::sqrt(num / den);
}

double mae(const Tensor& pred, const Tensor& truth) {
  check_same_shape(pred, truth);
  auto p = pred.data();
  auto t = truth.data();
  if (p.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += std::abs(p[i] - t[i]);
  return sum / static_cast<double>(p.size());
}

std::string_view to_string(Metric m) { return m == Metric::mae ? "mae" : "relative_l2"; }

Metric metric_from_string(std::string_view name) {
  if (name == "relative_l2") return Metric::relative_l2;
  if (name == "mae") return Metric::mae;
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

double metric_value(Metric m, const Tensor& pred, const Tensor& truth) {
  return m == Metric::mae ? mae(pred, truth) : relative_l2(pred, truth);
}

// ---------------------------------------------------------------------------
// split access

FinalEvaluation FinalEvaluation::open() {
  if (SearchScope::active()) throw std::logic_error("test split requested while a search is running");
  return FinalEvaluation();
}

SearchScope::SearchScope() { ++g_active_searches; }
SearchScope::~SearchScope() { --g_active_searches; }
bool SearchScope::active() { return g_active_searches.load() > 0; }

ExperimentData::ExperimentData(Dataset dataset) : dataset_(std::move(dataset)) {
  if (dataset_.train.empty() || dataset_.val.empty())
    throw ConfigError("dataset needs non-empty train and validation splits");
}

std::size_t ExperimentData::in_channels() const { return dataset_.train.front().input.dim(1); }

// ---------------------------------------------------------------------------
// training

void to_json(json& j, const TrainingConfig& c) {
  j = json{{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"optimizer", c.optimizer}};
}

void from_json(const json& j, TrainingConfig& c) {
  reject_unknown(j, {"epochs", "batch_size", "lr", "optimizer"}, "training");
  TrainingConfig d;
  c.epochs = get_or(j, "epochs", d.epochs);
  c.batch_size = get_or(j, "batch_size", d.batch_size);
  c.lr = get_or(j, "lr", d.lr);
  c.optimizer = get_or(j, "optimizer", d.optimizer);
}

std::size_t default_epochs(PdeKind problem, bool full_scale) {
  switch (problem) {
    case PdeKind::heat_annulus: return full_scale ? 1000 : 2000;
    case PdeKind::poisson: return full_scale ? 10000 : 2000;
    case PdeKind::darcy: return full_scale ? 300 : 1000;
  }
  return 2000;
}

std::string_view to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::completed: return "completed";
    case TrainStatus::stopped: return "stopped";
    case TrainStatus::diverged: return "diverged";
  }
  return "completed";
}

Trainer::Trainer(Network& network, LossEvaluator loss, SplitRef<TrainSplit> train, SplitRef<ValSplit> val,
                 TrainingConfig config, Metric metric, std::uint64_t seed)
    : net_(&network),
      loss_(std::move(loss)),
      train_(train),
      val_(val),
      config_(std::move(config)),
      metric_(metric),
      rng_(seed),
      params_(network.parameters()) {
  if (config_.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (config_.optimizer != "adam") throw ConfigError("unsupported optimizer '" + config_.optimizer + "'");
  adam_.lr = config_.lr;
  weights_.mode = WeightState::mode_for(loss_.genome().weight.kind);
}

EpochRecord Trainer::epoch() {
  const auto samples = train_.samples();
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng_);

  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
    const std::size_t end = std::min(order.size(), b + config_.batch_size);
    std::vector<const GridSample*> batch;
    std::vector<std::size_t> ids;
    std::vector<Tensor> xs;
    for (std::size_t i = b; i < end; ++i) {
      batch.push_back(&samples[order[i]]);
      ids.push_back(order[i]);
      xs.push_back(samples[order[i]].input);
    }
    Tensor y = net_->forward(stack_batch(xs));
    LossTerms terms = loss_(y, batch, ids, weights_);
    const double value = terms.total.item();
    if (!std::isfinite(value))
      throw DivergenceError("non-finite training loss at epoch " + std::to_string(done_ + 1));
    backward(terms.total);
    adam_step(params_, adam_);
    zero_grads(params_);
    total += value;
    ++batches;
  }

  EpochRecord rec;
  rec.epoch = ++done_;
  rec.train_loss = batches ? total / static_cast<double>(batches) : 0.0;
  rec.val_metric = evaluate(*net_, loss_, val_, metric_);
  if (!std::isfinite(rec.val_metric))
    throw DivergenceError("non-finite validation metric at epoch " + std::to_string(rec.epoch));
  return rec;
}

TrainResult train(Network& network, const LossEvaluator& loss, SplitRef<TrainSplit> train_split,
                  SplitRef<ValSplit> val_split, const TrainingConfig& config, Metric metric, std::uint64_t seed,
                  const std::function<bool(const EpochRecord&)>& on_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  Trainer trainer(network, loss, train_split, val_split, config, metric, seed);
  try {
    for (std::size_t e = 0; e < config.epochs; ++e) {
      result.trace.push_back(trainer.epoch());
      if (on_epoch && on_epoch(result.trace.back())) {
        result.status = TrainStatus::stopped;
        break;
      }
    }
  } catch (const DivergenceError& err) {
    result.status = TrainStatus::diverged;
    result.message = err.what();
  }
  result.seconds = seconds_since(t0);
  return result;
}

double evaluate(const Network& network, const LossEvaluator& loss, std::span<const GridSample> samples,
                Metric metric) {
  return evaluate_forward([&](const Tensor& x) { return network.forward(x); }, loss, samples, metric);
}

void save_parameters(const Network& network, const fs::path& path) {
  std::vector<double> flat;
  for (const auto& p : network.parameters()) {
    auto d = p.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::size_t n = flat.size();
  write_tensor(path, Tensor::from({n}, std::move(flat)));
}

void load_parameters(Network& network, const fs::path& path) {
  Tensor flat = read_tensor(path);
  auto params = network.parameters();
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  if (flat.numel() != total)
    throw ConfigError("parameter file " + path.string() + " holds " + std::to_string(flat.numel()) +
                      " values, network has " + std::to_string(total));
  auto src = flat.data();
  std::size_t offset = 0;
  for (auto& p : params) {
    auto dst = p.mutable_data();
    std::copy(src.begin() + offset, src.begin() + offset + dst.size(), dst.begin());
    offset += dst.size();
  }
}

// ---------------------------------------------------------------------------
// search adapters

void to_json(json& j, const ArchSpec& a) { j = json{{"space", a.space}, {"genome", genome_to_json(a.space, a.genome)}}; }

void from_json(const json& j, ArchSpec& a) {
  a.space = j.at("space").get<SearchSpace>();
  a.genome = genome_from_json(a.space, j.at("genome"));
}

NetworkOptions network_options(const ExperimentData& data, std::uint64_t seed) {
  NetworkOptions o;
  o.in_channels = data.in_channels();
  o.out_channels = 1;
  o.cols = data.spec().problem == PdeKind::heat_annulus ? PadMode::circular : PadMode::zeros;
  o.seed = seed;
  return o;
}

std::vector<ArchSpec> default_networks(PdeKind problem, const SearchSpace& space, std::size_t count,
                                       std::uint64_t seed) {
  if (problem != PdeKind::heat_annulus) {
    SearchSpace unet = SearchSpace::make(SpaceKind::unet_entire);
    return {ArchSpec{unet, ArchGenome(unet.slots.size(), 0)}};
  }
  if (count == 0) throw ConfigError("default_networks must be positive");
  Rng rng(seed);
  std::vector<ArchSpec> out;
  for (std::size_t k = 0; k < count; ++k) {
    ArchGenome g;
    for (const auto& slot : space.slots) {
      std::uniform_int_distribution<std::size_t> pick(0, slot.candidates.size() - 1);
      g.push_back(pick(rng));
    }
    out.push_back(ArchSpec{space, std::move(g)});
  }
  return out;
}

LossTrainer make_loss_trainer(const ExperimentData& data, std::vector<ArchSpec> networks,
                              const TrainingConfig& config, Metric metric, std::uint64_t seed) {
  return [&data, networks = std::move(networks), config, metric, seed](const LossGenome& genome,
                                                                        TrialMonitor& monitor) {
    LossEvaluator loss(genome, data.spec().problem);
    std::vector<Network> nets;
    nets.reserve(networks.size());
    for (std::size_t k = 0; k < networks.size(); ++k)
      nets.push_back(Network::build(networks[k].space, networks[k].genome,
                                    network_options(data, derive_seed(seed, "default-network", k))));
    std::vector<Trainer> trainers;
    trainers.reserve(nets.size());
    for (std::size_t k = 0; k < nets.size(); ++k)
      trainers.emplace_back(nets[k], loss, data.train(), data.val(), config, metric,
                            derive_seed(seed, "default-network-batches", k));

    double mean = 0.0;
    if (config.epochs == 0) {
      for (auto& n : nets) mean += evaluate(n, loss, data.val(), metric);
      return mean / static_cast<double>(nets.size());
    }
    for (std::size_t e = 1; e <= config.epochs; ++e) {
      mean = 0.0;
      for (auto& t : trainers) mean += t.epoch().val_metric;
      mean /= static_cast<double>(trainers.size());
      if (monitor.report(e, mean)) break;
    }
    return mean;
  };
}

ArchTrainer make_arch_trainer(const ExperimentData& data, const LossGenome& loss, const SearchSpace& space,
                              const TrainingConfig& config, Metric metric, std::uint64_t seed) {
  return [&data, loss, space, config, metric, seed](const ArchGenome& genome) {
    LossEvaluator ev(loss, data.spec().problem);
    Network net = Network::build(space, genome, network_options(data, derive_seed(seed, "network")));
    if (config.epochs == 0) return evaluate(net, ev, data.val(), metric);
    TrainResult r = train(net, ev, data.train(), data.val(), config, metric, derive_seed(seed, "batches"));
    if (r.status == TrainStatus::diverged) throw DivergenceError(r.message);
    return r.trace.back().val_metric;
  };
}

ArchTask make_arch_task(const ExperimentData& data, const LossGenome& loss, std::size_t batch_size,
                        Metric metric, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  auto ev = std::make_shared<LossEvaluator>(loss, data.spec().problem);
  auto weights = std::make_shared<WeightState>();
  weights->mode = WeightState::mode_for(loss.weight.kind);
  const auto train = data.train().samples();
  const auto val = data.val().samples();
  const std::size_t per_epoch = (train.size() + batch_size - 1) / batch_size;

  ArchTask task;
  task.train_loss = [ev, weights, train, batch_size, per_epoch, seed](const Forward& f, std::size_t step) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "arch-batches", step / per_epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t b = (step % per_epoch) * batch_size;
    const std::size_t end = std::min(order.size(), b + batch_size);
    std::vector<const GridSample*> batch;
    std::vector<std::size_t> ids;
    std::vector<Tensor> xs;
    for (std::size_t i = b; i < end; ++i) {
      batch.push_back(&train[order[i]]);
      ids.push_back(order[i]);
      xs.push_back(train[order[i]].input);
    }
    return (*ev)(f(stack_batch(xs)), batch, ids, *weights).total;
  };
  task.val_loss = [ev, val](const Forward& f, std::size_t) {
    std::vector<Tensor> xs;
    for (const auto& s : val) xs.push_back(s.input);
    WeightState scratch;
    return (*ev)(f(stack_batch(xs)), pointers(val), {}, scratch).total;
  };
  task.val_error = [ev, val, metric](const Forward& f) { return evaluate_forward(f, *ev, val, metric); };
  return task;
}

// ---------------------------------------------------------------------------
// experiment config

std::string_view to_string(ArchStrategy s) {
  switch (s) {
    case ArchStrategy::rl: return "rl";
    case ArchStrategy::enas: return "enas";
    case ArchStrategy::darts: return "darts";
  }
  return "rl";
}

ArchStrategy arch_strategy_from_string(std::string_view name) {
  if (name == "rl") return ArchStrategy::rl;
  if (name == "enas") return ArchStrategy::enas;
  if (name == "darts") return ArchStrategy::darts;
  throw ConfigError("unknown architecture strategy '" + std::string(name) + "'");
}

namespace {

void loss_stage_to_json(json& j, const LossStageConfig& c) {
  j = json{{"budget", c.budget},   {"workers", c.workers},
           {"initial_random", c.initial_random}, {"epochs", c.epochs},
           {"default_networks", c.default_networks}, {"median_stop", c.median_stop}};
  if (c.fixed) j["fixed"] = *c.fixed;
}

LossStageConfig loss_stage_from_json(const json& j) {
  reject_unknown(j, {"budget", "workers", "initial_random", "epochs", "default_networks", "median_stop", "fixed"},
                 "loss_search");
  LossStageConfig c;
  c.budget = get_or(j, "budget", c.budget);
  c.workers = get_or(j, "workers", c.workers);
  c.initial_random = get_or(j, "initial_random", c.initial_random);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.default_networks = get_or(j, "default_networks", c.default_networks);
  c.median_stop = get_or(j, "median_stop", c.median_stop);
  if (j.contains("fixed")) c.fixed = j.at("fixed").get<LossGenome>();
  return c;
}

void arch_stage_to_json(json& j, const ArchStageConfig& c) {
  j = json{{"strategy", to_string(c.strategy)}, {"budget", c.budget}, {"workers", c.workers}, {"epochs", c.epochs}};
  if (c.fixed) j["fixed"] = *c.fixed;
}

ArchStageConfig arch_stage_from_json(const json& j) {
  reject_unknown(j, {"strategy", "budget", "workers", "epochs", "fixed"}, "arch_search");
  ArchStageConfig c;
  if (j.contains("strategy")) c.strategy = arch_strategy_from_string(j.at("strategy").get<std::string>());
  c.budget = get_or(j, "budget", c.budget);
  c.workers = get_or(j, "workers", c.workers);
  c.epochs = get_or(j, "epochs", c.epochs);
  if (j.contains("fixed")) c.fixed = j.at("fixed").get<ArchSpec>();
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!dataset_dir) dataset.validate();
  if (dataset_dir && !fs::is_directory(*dataset_dir))
    throw ConfigError("dataset_dir " + dataset_dir->string() + " does not exist");
  if (loss_search.budget == 0) throw ConfigError("loss_search.budget must be at least 1");
  if (loss_search.workers == 0) throw ConfigError("loss_search.workers must be at least 1");
  if (loss_search.default_networks == 0) throw ConfigError("loss_search.default_networks must be at least 1");
  if (loss_search.fixed) loss_search.fixed->validate();
  if (arch_search.budget == 0) throw ConfigError("arch_search.budget must be at least 1");
  if (arch_search.workers == 0) throw ConfigError("arch_search.workers must be at least 1");
  if (arch_search.fixed) validate_genome(arch_search.fixed->space, arch_search.fixed->genome);
  if (space == SpaceKind::chain) throw ConfigError("space 'chain' is for tests only");
  if (training.batch_size == 0) throw ConfigError("training.batch_size must be at least 1");
  if (!(training.lr > 0.0) || !std::isfinite(training.lr)) throw ConfigError("training.lr must be positive");
  if (training.optimizer != "adam") throw ConfigError("training.optimizer must be 'adam'");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json::object();
  j["dataset"] = c.dataset;
  if (c.dataset_dir) j["dataset_dir"] = c.dataset_dir->string();
  j["seed"] = c.seed;
  j["space"] = to_string(c.space);
  loss_stage_to_json(j["loss_search"], c.loss_search);
  arch_stage_to_json(j["arch_search"], c.arch_search);
  j["training"] = c.training;
  j["metric"] = to_string(c.metric);
  j["output_dir"] = c.output_dir.string();
}

void from_json(const json& j, ExperimentConfig& c) {
  try {
    reject_unknown(j,
                   {"dataset", "problem", "dataset_dir", "seed", "space", "loss_search", "arch_search", "training",
                    "metric", "output_dir"},
                   "config");
    c = ExperimentConfig{};
    if (j.contains("dataset")) {
      c.dataset = j.at("dataset").get<DatasetSpec>();
    } else if (j.contains("problem")) {
      c.dataset = DatasetSpec::defaults(pde_kind_from_string(j.at("problem").get<std::string>()));
    } else if (!j.contains("dataset_dir")) {
      throw ConfigError("config needs one of 'dataset', 'problem' or 'dataset_dir'");
    }
    if (j.contains("dataset_dir")) c.dataset_dir = fs::path(j.at("dataset_dir").get<std::string>());
    c.seed = get_or(j, "seed", c.seed);
    if (j.contains("space")) c.space = space_kind_from_string(j.at("space").get<std::string>());
    if (j.contains("loss_search")) c.loss_search = loss_stage_from_json(j.at("loss_search"));
    if (j.contains("arch_search")) c.arch_search = arch_stage_from_json(j.at("arch_search"));
    c.training.epochs = default_epochs(c.dataset.problem);
    if (j.contains("training")) {
      const std::size_t fallback = c.training.epochs;
      c.training = j.at("training").get<TrainingConfig>();
      if (!j.at("training").contains("epochs")) c.training.epochs = fallback;
    }
    if (j.contains("metric")) c.metric = metric_from_string(j.at("metric").get<std::string>());
    if (j.contains("output_dir")) c.output_dir = fs::path(j.at("output_dir").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  json j = read_json(path);
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

Dataset load_or_generate(const ExperimentConfig& config) {
  if (config.dataset_dir) return load_dataset(*config.dataset_dir);
  return generate_dataset(config.dataset);
}

// ---------------------------------------------------------------------------
// reports

void to_json(json& j, const MetricsReport& r) {
  json trace = json::array();
  for (const auto& e : r.trace)
    trace.push_back({{"epoch", e.epoch}, {"train_loss", finite_or_null(e.train_loss)},
                     {"val_metric", finite_or_null(e.val_metric)}});
  j = json{{"format_version", MetricsReport::kFormatVersion},
           {"problem", r.problem},
           {"metric", r.metric},
           {"status", r.status},
           {"metrics", {{"train", finite_or_null(r.train)}, {"val", finite_or_null(r.val)}, {"test", finite_or_null(r.test)}}},
           {"trace", trace},
           {"wall_clock_seconds", r.seconds},
           {"loss_genome", r.loss_genome},
           {"architecture", r.architecture}};
}

void from_json(const json& j, MetricsReport& r) {
  if (j.at("format_version").get<int>() != MetricsReport::kFormatVersion)
    throw ConfigError("unsupported report format version");
  r.problem = j.at("problem").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.status = j.at("status").get<std::string>();
  const auto& m = j.at("metrics");
  r.train = number_or_nan(m.at("train"));
  r.val = number_or_nan(m.at("val"));
  r.test = number_or_nan(m.at("test"));
  r.trace.clear();
  for (const auto& e : j.at("trace"))
    r.trace.push_back({e.at("epoch").get<std::size_t>(), number_or_nan(e.at("train_loss")),
                       number_or_nan(e.at("val_metric"))});
  r.seconds = j.at("wall_clock_seconds").get<double>();
  r.loss_genome = j.value("loss_genome", json());
  r.architecture = j.value("architecture", json());
}

std::string curves_csv(const std::vector<EpochRecord>& trace) {
  std::string out = "epoch,train_loss,val_metric\n";
  char buf[96];
  for (const auto& e : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_metric);
    out += buf;
  }
  return out;
}

void report_emit(const MetricsReport& report, const fs::path& dir) {
  write_text(dir / "report.json", json(report).dump(2) + "\n");
  write_text(dir / "curves.csv", curves_csv(report.trace));
}

MetricsReport read_report(const fs::path& dir) {
  json j = read_json(dir / "report.json");
  try {
    return j.get<MetricsReport>();
  } catch (const json::exception& e) {
    throw IoError((dir / "report.json").string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// pipeline

LossSearchResult run_loss_stage(const ExperimentData& data, const ExperimentConfig& config) {
  if (config.loss_search.fixed) {
    LossSearchResult r;
    r.best = *config.loss_search.fixed;
    r.best_error = std::nan("");
    return r;
  }
  SearchScope scope;
  const auto& ls = config.loss_search;
  LossSearchConfig lc;
  lc.budget = ls.budget;
  lc.workers = ls.workers;
  lc.initial_random = ls.initial_random;
  lc.seed = derive_seed(config.seed, "loss-search");
  lc.total_epochs = std::max<std::size_t>(ls.epochs, 1);
  lc.median_stop.enabled = ls.median_stop;
  auto networks = default_networks(data.spec().problem, SearchSpace::make(config.space), ls.default_networks,
                                   derive_seed(config.seed, "default-networks"));
  TrainingConfig tc = config.training;
  tc.epochs = ls.epochs;
  return run_loss_search(lc, make_loss_trainer(data, std::move(networks), tc, config.metric,
                                               derive_seed(config.seed, "loss-trials")));
}

ArchStageResult run_arch_stage(const ExperimentData& data, const ExperimentConfig& config, const LossGenome& loss) {
  ArchStageResult out;
  if (config.arch_search.fixed) {
    out.network = *config.arch_search.fixed;
    out.search.best = out.network.genome;
    out.search.best_error = std::nan("");
    return out;
  }
  SearchScope scope;
  const auto& as = config.arch_search;
  switch (as.strategy) {
    case ArchStrategy::rl: {
      SearchSpace space = SearchSpace::make(config.space, false);
      MultiTrialConfig mc;
      mc.budget = as.budget;
      mc.workers = as.workers;
      mc.seed = derive_seed(config.seed, "arch-search");
      mc.controller.seed = derive_seed(config.seed, "controller");
      TrainingConfig tc = config.training;
      tc.epochs = as.epochs;
      out.search = multi_trial_search(
          space, make_arch_trainer(data, loss, space, tc, config.metric, derive_seed(config.seed, "arch-trials")),
          mc);
      out.network = ArchSpec{space, out.search.best};
      break;
    }
    case ArchStrategy::enas:
    case ArchStrategy::darts: {
      SearchSpace space = SearchSpace::make(config.space, true);
      Network supernet = Network::supernet(space, network_options(data, derive_seed(config.seed, "supernet")));
      ArchTask task = make_arch_task(data, loss, config.training.batch_size, config.metric,
                                     derive_seed(config.seed, "arch-task"));
      if (as.strategy == ArchStrategy::enas) {
        EnasConfig ec;
        ec.iterations = as.budget;
        ec.weight_lr = config.training.lr;
        ec.seed = derive_seed(config.seed, "enas");
        ec.controller.seed = derive_seed(config.seed, "controller");
        out.search = enas_search(supernet, task, ec);
      } else {
        DartsConfig dc;
        dc.steps = as.budget;
        dc.weight_lr = config.training.lr;
        DartsResult dr = darts_search(supernet, task, dc);
        out.search.best = dr.genome;
        out.search.best_error = std::nan("");
        out.search.trace = dr.val_trace;
      }
      out.network = ArchSpec{space, out.search.best};
      break;
    }
  }
  return out;
}

namespace {

std::string trace_csv(const std::vector<double>& trace) {
  std::string out = "step,value\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, trace[i]);
    out += buf;
  }
  return out;
}

}  // namespace

PipelineResult two_stage_pipeline(const ExperimentConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  const fs::path out = config.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  Dataset dataset = load_or_generate(config);
  if (!config.dataset_dir) split_and_serialize(dataset, out / "data");

  json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config;
  manifest["seeds"] = {{"root", config.seed},
                       {"loss_search", derive_seed(config.seed, "loss-search")},
                       {"arch_search", derive_seed(config.seed, "arch-search")},
                       {"final_network", derive_seed(config.seed, "final-network")},
                       {"final_training", derive_seed(config.seed, "final-training")}};
  manifest["dataset_spec_hash"] = hex64(spec_hash(dataset.spec));
  manifest["config_hash"] = hex64(fnv1a64(json(config).dump()));
  manifest["status"] = "running";
  const fs::path manifest_path = out / "manifest.json";
  write_text(manifest_path, manifest.dump(2) + "\n");

  ExperimentData data(std::move(dataset));
  PipelineResult result;
  std::string stage = "loss_search";
  try {
    result.loss = run_loss_stage(data, config);
    write_text(out / "loss_genome.json", json(result.loss.best).dump(2) + "\n");
    if (!result.loss.trials.empty()) write_text(out / "loss_trials.csv", trials_csv(result.loss.trials));
    manifest["loss_genome"] = result.loss.best;

    stage = "arch_search";
    ArchStageResult arch = run_arch_stage(data, config, result.loss.best);
    result.arch = std::move(arch.search);
    result.network = std::move(arch.network);
    write_text(out / "architecture.json", json(result.network).dump(2) + "\n");
    if (!result.arch.trials.empty())
      write_text(out / "arch_trials.csv", arch_trials_csv(result.network.space, result.arch.trials));
    if (!result.arch.trace.empty()) write_text(out / "arch_trace.csv", trace_csv(result.arch.trace));
    manifest["architecture"] = result.network;

    stage = "final_training";
    LossEvaluator loss(result.loss.best, data.spec().problem);
    Network net = Network::build(result.network.space, result.network.genome,
                                 network_options(data, derive_seed(config.seed, "final-network")));
    TrainResult tr = train(net, loss, data.train(), data.val(), config.training, config.metric,
                           derive_seed(config.seed, "final-training"));
    MetricsReport& report = result.report;
    report.problem = std::string(to_string(data.spec().problem));
    report.metric = std::string(to_string(config.metric));
    report.status = std::string(to_string(tr.status));
    report.trace = tr.trace;
    report.loss_genome = result.loss.best;
    report.architecture = result.network;
    if (tr.status == TrainStatus::diverged) {
      report.train = report.val = report.test = std::nan("");
      report.seconds = seconds_since(t0);
      report_emit(report, out);
      throw DivergenceError(tr.message);
    }
    save_parameters(net, out / "model.ptns");

    stage = "final_evaluation";
    const FinalEvaluation key = FinalEvaluation::open();
    report.train = evaluate(net, loss, data.train(), config.metric);
    report.val = evaluate(net, loss, data.val(), config.metric);
    report.test = evaluate(net, loss, data.test(key), config.metric);
    report.seconds = seconds_since(t0);
    report_emit(report, out);
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    write_text(manifest_path, manifest.dump(2) + "\n");
    throw;
  }

  manifest["status"] = "completed";
  manifest["final_test_metric"] = result.report.test;
  manifest["final_test_metric_hex"] = hexfloat(result.report.test);
  write_text(manifest_path, manifest.dump(2) + "\n");
  return result;
}

PipelineResult rerun_from_manifest(const fs::path& manifest, const fs::path& output_dir) {
  json m = read_json(manifest);
  if (!m.contains("config")) throw ConfigError(manifest.string() + " has no recorded config");
  ExperimentConfig config;
  try {
    config = m.at("config").get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }
  config.output_dir = output_dir;
  return two_stage_pipeline(config);
}

}  // namespace picnn
