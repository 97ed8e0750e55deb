#include "picnn/loss_search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "picnn/error.hpp"

namespace picnn {

// ---------------------------------------------------------------------------
// Gaussian process

GaussianProcess::GaussianProcess(double noise, std::vector<double> length_scales)
    : noise_(noise), grid_(std::move(length_scales)) {
  if (grid_.empty()) throw ConfigError("GaussianProcess: empty length-scale grid");
}

double GaussianProcess::kernel(std::span<const double> a, std::span<const double> b, double ell) const {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  const double s = std::sqrt(5.0 * d2) / ell;
  return (1.0 + s + s * s / 3.0) * std::exp(-s);
}

void GaussianProcess::fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  if (x.empty() || x.size() != y.size()) throw ShapeError("GaussianProcess::fit: need matching non-empty x and y");
  const std::size_t n = x.size();
  for (const auto& row : x) {
    if (row.size() != x.front().size()) throw ShapeError("GaussianProcess::fit: ragged inputs");
  }
  y_mean_ = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : y) var += (v - y_mean_) * (v - y_mean_);
  var /= static_cast<double>(n);
  y_scale_ = var > 1e-24 ? std::sqrt(var) : 1.0;
  Eigen::VectorXd ys(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) ys[static_cast<Eigen::Index>(i)] = (y[i] - y_mean_) / y_scale_;

  bool found = false;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (double ell : grid_) {
    Eigen::MatrixXd k(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        const double v = kernel(x[i], x[j], ell);
        k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        k(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
      }
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += noise_;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) continue;
    Eigen::VectorXd alpha = llt.solve(ys);
    Eigen::MatrixXd l = llt.matrixL();
    const double lml = -0.5 * ys.dot(alpha) - l.diagonal().array().log().sum() -
                       0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (!std::isfinite(lml) || (found && lml <= best_lml)) continue;
    found = true;
    best_lml = lml;
    length_scale_ = ell;
    alpha_ = std::move(alpha);
    chol_l_ = std::move(l);
  }
  if (!found) throw SolverError("GaussianProcess::fit: covariance not positive definite for any length scale");
  lml_ = best_lml;
  x_ = x;
}

GaussianProcess::Prediction GaussianProcess::predict(std::span<const double> x) const {
  if (x_.empty()) throw std::logic_error("GaussianProcess::predict before fit");
  const auto n = static_cast<Eigen::Index>(x_.size());
  Eigen::VectorXd ks(n);
  for (Eigen::Index i = 0; i < n; ++i) ks[i] = kernel(x, x_[static_cast<std::size_t>(i)], length_scale_);
  const Eigen::VectorXd v = chol_l_.triangularView<Eigen::Lower>().solve(ks);
  Prediction p;
  p.mean = y_mean_ + y_scale_ * ks.dot(alpha_);
  p.variance = std::max(0.0, 1.0 - v.squaredNorm()) * y_scale_ * y_scale_;
  return p;
}

double expected_improvement(double mean, double variance, double best) {
  const double sigma = std::sqrt(std::max(variance, 0.0));
  const double gap = best - mean;
  if (sigma < 1e-300) return std::max(gap, 0.0);
  const double z = gap / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(0.0, gap * cdf + sigma * pdf);
}

namespace {

std::size_t random_free(const std::vector<bool>& taken, Rng& rng) {
  const auto free = static_cast<std::size_t>(std::count(taken.begin(), taken.end(), false));
  if (free == 0) return taken.size();
  std::size_t k = std::uniform_int_distribution<std::size_t>(0, free - 1)(rng);
  for (std::size_t i = 0; i < taken.size(); ++i) {
    if (!taken[i] && k-- == 0) return i;
  }
  return taken.size();
}

}  // namespace

std::size_t bo_suggest(const std::vector<std::vector<double>>& candidates, const std::vector<bool>& taken,
                       const std::vector<std::vector<double>>& observed_x, const std::vector<double>& observed_y,
                       Rng& rng) {
  if (taken.size() != candidates.size()) throw ShapeError("bo_suggest: taken flags and candidates differ in size");
  if (observed_x.size() < 2) return random_free(taken, rng);
  GaussianProcess gp;
  try {
    gp.fit(observed_x, observed_y);
  } catch (const SolverError&) {
    return random_free(taken, rng);
  }
  const double best = *std::min_element(observed_y.begin(), observed_y.end());
  std::size_t arg = candidates.size();
  double best_ei = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (taken[i]) continue;
    const auto p = gp.predict(candidates[i]);
    const double ei = expected_improvement(p.mean, p.variance, best);
    if (ei > best_ei) {
      best_ei = ei;
      arg = i;
    }
  }
  return arg;
}

// ---------------------------------------------------------------------------
// median stopping

bool median_stop_check(std::span<const double> trace, const std::vector<std::vector<double>>& completed,
                       std::size_t total_epochs, const MedianStopConfig& config) {
  if (!config.enabled || trace.empty()) return false;
  const std::size_t epoch = trace.size();
  const auto grace = static_cast<std::size_t>(std::ceil(config.grace_fraction * static_cast<double>(total_epochs)));
  if (epoch <= grace) return false;

  std::vector<double> averages;
  for (const auto& t : completed) {
    if (t.empty()) continue;
    const std::size_t k = std::min(epoch, t.size());
    averages.push_back(std::accumulate(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
                       static_cast<double>(k));
  }
  if (averages.empty() || averages.size() < config.min_completed) return false;
  std::sort(averages.begin(), averages.end());
  const std::size_t m = averages.size();
  const double median = m % 2 ? averages[m / 2] : 0.5 * (averages[m / 2 - 1] + averages[m / 2]);
  const double best = *std::min_element(trace.begin(), trace.end());
  return best > median;
}

std::string_view to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::running: return "running";
    case TrialStatus::completed: return "completed";
    case TrialStatus::stopped: return "stopped";
    case TrialStatus::failed: return "failed";
  }
  return "running";
}

// ---------------------------------------------------------------------------
// config

void to_json(nlohmann::json& j, const LossSearchConfig& c) {
  j = {{"space", c.space},
       {"budget", c.budget},
       {"workers", c.workers},
       {"initial_random", c.initial_random},
       {"seed", c.seed},
       {"total_epochs", c.total_epochs},
       {"median_stop",
        {{"enabled", c.median_stop.enabled},
         {"grace_fraction", c.median_stop.grace_fraction},
         {"min_completed", c.median_stop.min_completed}}}};
}

void from_json(const nlohmann::json& j, LossSearchConfig& c) {
  try {
    c = LossSearchConfig{};
    if (j.contains("space")) c.space = j.at("space").get<LossSpace>();
    c.budget = j.value("budget", c.budget);
    c.workers = j.value("workers", c.workers);
    c.initial_random = j.value("initial_random", c.initial_random);
    c.seed = j.value("seed", c.seed);
    c.total_epochs = j.value("total_epochs", c.total_epochs);
    if (j.contains("median_stop")) {
      const auto& m = j.at("median_stop");
      c.median_stop.enabled = m.value("enabled", c.median_stop.enabled);
      c.median_stop.grace_fraction = m.value("grace_fraction", c.median_stop.grace_fraction);
      c.median_stop.min_completed = m.value("min_completed", c.median_stop.min_completed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss search config: ") + e.what());
  }
  if (c.budget == 0) throw ConfigError("loss search config: budget must be >= 1");
  if (c.workers == 0) throw ConfigError("loss search config: workers must be >= 1");
}

// ---------------------------------------------------------------------------
// search driver

namespace {

struct SearchState {
  const LossSearchConfig& config;
  std::vector<LossGenome> genomes;
  std::vector<std::vector<double>> encoded;
  std::vector<bool> taken;
  std::vector<TrialRecord> trials;
  std::vector<std::vector<double>> obs_x;
  std::vector<double> obs_y;
  std::vector<std::vector<double>> completed_traces;
  std::size_t finished = 0;
  Rng rng;
  std::mutex mutex;

  explicit SearchState(const LossSearchConfig& c) : config(c), rng(derive_seed(c.seed, "loss-search")) {
    genomes = c.space.enumerate();
    std::unordered_set<std::string> seen;
    std::vector<LossGenome> unique;
    for (auto& g : genomes) {
      if (seen.insert(g.key()).second) unique.push_back(std::move(g));
    }
    genomes = std::move(unique);
    for (const auto& g : genomes) encoded.push_back(c.space.encode(g));
    taken.assign(genomes.size(), false);
  }

  // Picks the next genome; caller holds the lock. Returns false when the budget
  // or the space is exhausted.
  bool issue(std::size_t& trial) {
    if (trials.size() >= config.budget) return false;
    std::size_t pick;
    if (finished < config.initial_random || obs_x.size() < 2) {
      pick = random_free(taken, rng);
    } else {
      pick = bo_suggest(encoded, taken, obs_x, obs_y, rng);
    }
    if (pick >= genomes.size()) return false;
    taken[pick] = true;
    TrialRecord r;
    r.index = trials.size();
    r.genome = genomes[pick];
    trials.push_back(std::move(r));
    trial = trials.size() - 1;
    return true;
  }
};

class Monitor : public TrialMonitor {
 public:
  Monitor(SearchState& s, std::size_t trial) : s_(s), trial_(trial) {}
  bool report(std::size_t, double metric) override {
    std::lock_guard lock(s_.mutex);
    auto& t = s_.trials[trial_];
    t.trace.push_back(metric);
    if (!std::isfinite(metric)) return true;
    if (median_stop_check(t.trace, s_.completed_traces, s_.config.total_epochs, s_.config.median_stop)) {
      stopped_ = true;
    }
    return stopped_;
  }
  bool stopped() const { return stopped_; }

 private:
  SearchState& s_;
  std::size_t trial_;
  bool stopped_ = false;
};

void worker(SearchState& s, const LossTrainer& trainer) {
  for (;;) {
    std::size_t trial;
    LossGenome genome;
    {
      std::lock_guard lock(s.mutex);
      if (!s.issue(trial)) return;
      genome = s.trials[trial].genome;
    }
    Monitor monitor(s, trial);
    const auto start = std::chrono::steady_clock::now();
    double error = std::numeric_limits<double>::quiet_NaN();
    std::string message;
    try {
      error = trainer(genome, monitor);
      if (!std::isfinite(error)) message = "non-finite validation error";
    } catch (const std::exception& e) {
      message = e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    std::lock_guard lock(s.mutex);
    auto& t = s.trials[trial];
    t.seconds = seconds;
    t.error = error;
    ++s.finished;
    if (message.empty() && !std::isfinite(error)) message = "non-finite validation error";
    if (!message.empty()) {
      t.status = TrialStatus::failed;
      t.message = message;
      continue;
    }
    t.status = monitor.stopped() ? TrialStatus::stopped : TrialStatus::completed;
    double observed = error;
    if (t.status == TrialStatus::stopped) {
      // only completed trials carry a final error; the surrogate sees the best-so-far
      if (!t.trace.empty()) observed = *std::min_element(t.trace.begin(), t.trace.end());
      t.error = std::numeric_limits<double>::quiet_NaN();
    } else if (!t.trace.empty()) {
      s.completed_traces.push_back(t.trace);
    }
    s.obs_x.push_back(s.config.space.encode(genome));
    s.obs_y.push_back(observed);
  }
}

}  // namespace

LossSearchResult run_loss_search(const LossSearchConfig& config, const LossTrainer& trainer) {
  if (config.budget == 0 || config.workers == 0) throw ConfigError("run_loss_search: budget and workers must be >= 1");
  SearchState state(config);
  if (config.workers == 1) {
    worker(state, trainer);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(config.workers, config.budget); ++w) {
      pool.emplace_back([&] { worker(state, trainer); });
    }
  }

  LossSearchResult result;
  result.trials = std::move(state.trials);
  const TrialRecord* best = nullptr;
  for (const auto& t : result.trials) {
    if (t.status == TrialStatus::completed && (!best || t.error < best->error)) best = &t;
  }
  if (!best) {
    std::ostringstream msg;
    msg << "loss search: none of " << result.trials.size() << " trials completed";
    for (const auto& t : result.trials) {
      msg << "\n  trial " << t.index << " " << to_string(t.status);
      if (!t.message.empty()) msg << ": " << t.message;
    }
    throw SearchError(msg.str());
  }
  result.best = best->genome;
  result.best_error = best->error;
  return result;
}

std::string trials_csv(const std::vector<TrialRecord>& trials) {
  std::ostringstream out;
  out.precision(10);
  out << "index,status,error,epochs,seconds,genome\n";
  for (const auto& t : trials) {
    std::string key = t.genome.key();
    std::string quoted;
    for (char c : key) {
      if (c == '"') quoted += '"';
      quoted += c;
    }
    out << t.index << ',' << to_string(t.status) << ',' << t.error << ',' << t.trace.size() << ',' << t.seconds
        << ",\"" << quoted << "\"\n";
  }
  return out.str();
}

}  // namespace picnn
