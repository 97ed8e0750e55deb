#include "picnn/nas.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"

namespace picnn {

double reward_from_error(double error, double epsilon) {
  if (std::isnan(error) || std::isinf(error)) return 0.0;
  if (error <= 0.0) {
    std::cerr << "warning: non-positive validation error " << error << " clamped to " << epsilon << "\n";
    error = epsilon;
  }
  return 1.0 / error;
}

void to_json(nlohmann::json& j, const ControllerConfig& c) {
  j = {{"hidden", c.hidden}, {"embed", c.embed}, {"lr", c.lr}, {"baseline_decay", c.baseline_decay}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ControllerConfig& c) {
  try {
    c = ControllerConfig{};
    c.hidden = j.value("hidden", c.hidden);
    c.embed = j.value("embed", c.embed);
    c.lr = j.value("lr", c.lr);
    c.baseline_decay = j.value("baseline_decay", c.baseline_decay);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("controller config: ") + e.what());
  }
  if (c.hidden == 0 || c.embed == 0 || !(c.lr > 0.0) || c.baseline_decay < 0.0 || c.baseline_decay >= 1.0) {
    throw ConfigError("controller config: sizes must be positive, lr > 0, decay in [0,1)");
  }
}

// ---------------------------------------------------------------------------
// controller

namespace {

Tensor param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = bound > 0.0 ? dist(rng) : 0.0;
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Controller::Controller(std::vector<std::size_t> slot_sizes, ControllerConfig config)
    : sizes_(std::move(slot_sizes)), config_(config) {
  if (sizes_.empty()) throw ConfigError("controller: no slots");
  std::size_t tokens = 1;
  for (std::size_t k : sizes_) {
    if (k == 0) throw ConfigError("controller: empty slot");
    token_offset_.push_back(tokens);
    tokens += k;
  }
  Rng rng(derive_seed(config.seed, "controller-init"));
  const std::size_t h = config.hidden, e = config.embed;
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  embed_ = param({tokens, e}, std::sqrt(3.0), rng);  // unit variance
  wx_ = param({e, 4 * h}, bound, rng);
  wh_ = param({h, 4 * h}, bound, rng);
  bias_ = param({1, 4 * h}, bound, rng);
  for (std::size_t k : sizes_) {
    head_w_.push_back(param({h, k}, 0.0, rng));
    head_b_.push_back(param({1, k}, 0.0, rng));
  }
}

std::vector<Tensor> Controller::parameters() const {
  std::vector<Tensor> p{embed_, wx_, wh_, bias_};
  p.insert(p.end(), head_w_.begin(), head_w_.end());
  p.insert(p.end(), head_b_.begin(), head_b_.end());
  return p;
}

std::vector<Tensor> Controller::logits_along(ArchGenome& genome, Rng* rng, bool greedy) const {
  const bool choose = rng || greedy;
  if (choose) {
    genome.assign(sizes_.size(), 0);
  } else if (genome.size() != sizes_.size()) {
    throw ConfigError("controller: genome length does not match the slot count");
  }
  const std::size_t h = config_.hidden;
  Tensor hs = Tensor::zeros({1, h}), cs = Tensor::zeros({1, h});
  std::size_t token = 0;
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < sizes_.size(); ++s) {
    Tensor x = select_row(embed_, token);
    Tensor gates = add(add(matmul(x, wx_), matmul(hs, wh_)), bias_);
    Tensor i = sigmoid(slice_cols(gates, 0, h));
    Tensor f = sigmoid(slice_cols(gates, h, 2 * h));
    Tensor g = tanh(slice_cols(gates, 2 * h, 3 * h));
    Tensor o = sigmoid(slice_cols(gates, 3 * h, 4 * h));
    cs = add(mul(f, cs), mul(i, g));
    hs = mul(o, tanh(cs));
    Tensor logits = add(matmul(hs, head_w_[s]), head_b_[s]);
    if (choose) {
      const auto l = logits.data();
      std::size_t pick = 0;
      if (greedy) {
        pick = static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
      } else {
        Tensor p = softmax(logits);
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(*rng);
        double acc = 0.0;
        pick = sizes_[s] - 1;
        for (std::size_t k = 0; k < sizes_[s]; ++k) {
          acc += p.at(k);
          if (u < acc) {
            pick = k;
            break;
          }
        }
      }
      genome[s] = pick;
    } else if (genome[s] >= sizes_[s]) {
      throw ConfigError("controller: genome choice out of range");
    }
    token = token_offset_[s] + genome[s];
    out.push_back(std::move(logits));
  }
  return out;
}

Controller::Sample Controller::sample(Rng& rng) const {
  NoGradGuard guard;
  Sample s;
  auto logits = logits_along(s.genome, &rng, false);
  for (std::size_t i = 0; i < logits.size(); ++i) s.log_probs.push_back(log_softmax(logits[i]).at(s.genome[i]));
  return s;
}

ArchGenome Controller::argmax() const {
  NoGradGuard guard;
  ArchGenome g;
  logits_along(g, nullptr, true);
  return g;
}

std::vector<std::vector<double>> Controller::probabilities(const ArchGenome& genome) const {
  NoGradGuard guard;
  ArchGenome g = genome;
  std::vector<std::vector<double>> out;
  for (const Tensor& l : logits_along(g, nullptr, false)) {
    Tensor p = softmax(l);
    out.emplace_back(p.data().begin(), p.data().end());
  }
  return out;
}

Tensor Controller::log_prob(const ArchGenome& genome) const {
  ArchGenome g = genome;
  auto logits = logits_along(g, nullptr, false);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < logits.size(); ++s) total = add(total, select(log_softmax(logits[s]), g[s]));
  return total;
}

double Controller::update(const ArchGenome& genome, double reward) {
  if (!std::isfinite(reward)) throw std::invalid_argument("controller: non-finite reward");
  if (!has_baseline_) {
    baseline_ = reward;
    has_baseline_ = true;
  }
  const double advantage = reward - baseline_;
  auto params = parameters();
  zero_grads(params);
  if (advantage != 0.0) {
    backward(log_prob(genome));
    sgd_step(params, config_.lr * advantage, 1.0);
    zero_grads(params);
  }
  baseline_ = config_.baseline_decay * baseline_ + (1.0 - config_.baseline_decay) * reward;
  return advantage;
}

// ---------------------------------------------------------------------------
// multi-trial

ArchSearchResult multi_trial_search(const SearchSpace& space, const ArchTrainer& trainer,
                                    const MultiTrialConfig& config) {
  if (config.budget == 0 || config.workers == 0) throw ConfigError("multi-trial search: budget and workers must be >= 1");
  ControllerConfig cc = config.controller;
  cc.seed = derive_seed(config.seed, "controller", cc.seed);
  Controller controller(space.slot_sizes(), cc);
  Rng rng(derive_seed(config.seed, "controller-sample"));
  std::mutex mutex;
  ArchSearchResult result;
  std::size_t issued = 0;

  auto work = [&] {
    for (;;) {
      ArchTrial trial;
      {
        std::lock_guard lock(mutex);
        if (issued >= config.budget) return;
        trial.index = issued++;
        trial.genome = controller.sample(rng).genome;
      }
      const auto start = std::chrono::steady_clock::now();
      try {
        trial.error = trainer(trial.genome);
        if (!std::isfinite(trial.error)) {
          trial.status = ArchTrialStatus::diverged;
          trial.message = "non-finite validation error";
        }
      } catch (const std::exception& e) {
        trial.status = ArchTrialStatus::diverged;
        trial.error = std::numeric_limits<double>::infinity();
        trial.message = e.what();
      }
      trial.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      trial.reward = reward_from_error(trial.error, config.reward_epsilon);
      std::lock_guard lock(mutex);
      controller.update(trial.genome, trial.reward);
      result.trace.push_back(trial.reward);
      result.trials.push_back(std::move(trial));
    }
  };
  if (config.workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(config.workers, config.budget); ++w) pool.emplace_back(work);
  }
  std::sort(result.trials.begin(), result.trials.end(),
            [](const ArchTrial& a, const ArchTrial& b) { return a.index < b.index; });
  const ArchTrial* best = nullptr;
  for (const auto& t : result.trials) {
    if (!best || t.reward > best->reward) best = &t;
  }
  result.best = best->genome;
  result.best_error = best->error;
  return result;
}

std::string arch_trials_csv(const SearchSpace& space, const std::vector<ArchTrial>& trials) {
  std::ostringstream out;
  out.precision(10);
  out << "index,status,error,reward,seconds,genome\n";
  for (const auto& t : trials) {
    out << t.index << ',' << (t.status == ArchTrialStatus::completed ? "completed" : "diverged") << ',' << t.error
        << ',' << t.reward << ',' << t.seconds << ",\"" << genome_string(space, t.genome) << "\"\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// DARTS

std::vector<Tensor> darts_probabilities(const std::vector<Tensor>& alpha) {
  std::vector<Tensor> p;
  for (const auto& a : alpha) p.push_back(softmax(a));
  return p;
}

namespace {

void set_trainable(std::vector<Tensor>& ts, bool on) {
  for (auto& t : ts) t.set_requires_grad(on);
}

}  // namespace

DartsResult darts_search(Network& supernet, const ArchTask& task, const DartsConfig& config,
                         std::vector<Tensor>* alpha_io) {
  const auto& space = supernet.space();
  std::vector<Tensor> alpha;
  if (alpha_io && !alpha_io->empty()) {
    alpha = *alpha_io;
  } else {
    for (const auto& s : space.slots) alpha.push_back(Tensor::zeros({s.candidates.size()}));
  }
  if (alpha.size() != space.slots.size()) throw ShapeError("darts_search: one alpha vector per slot");
  set_trainable(alpha, true);
  auto weights = supernet.parameters();
  AdamState wopt, aopt;
  wopt.lr = config.weight_lr;
  aopt.lr = config.alpha_lr;

  DartsResult res;
  auto track = [&](const std::vector<Tensor>& probs) {
    for (const auto& p : probs) {
      double s = 0.0;
      for (double v : p.data()) s += v;
      res.max_normalization_error = std::max(res.max_normalization_error, std::abs(s - 1.0));
    }
  };
  for (std::size_t step = 0; step < config.steps; ++step) {
    {
      set_trainable(alpha, false);
      auto probs = darts_probabilities(alpha);
      track(probs);
      Forward f = [&](const Tensor& x) { return supernet.forward_mixed(x, probs); };
      Tensor loss = task.train_loss(f, step);
      if (!std::isfinite(loss.item())) throw DivergenceError("darts: non-finite training loss at step " + std::to_string(step));
      zero_grads(weights);
      backward(loss);
      adam_step(weights, wopt);
      zero_grads(weights);
      set_trainable(alpha, true);
    }
    {
      set_trainable(weights, false);
      auto probs = darts_probabilities(alpha);
      track(probs);
      Forward f = [&](const Tensor& x) { return supernet.forward_mixed(x, probs); };
      Tensor loss = task.val_loss(f, step);
      if (!std::isfinite(loss.item())) throw DivergenceError("darts: non-finite validation loss at step " + std::to_string(step));
      zero_grads(alpha);
      backward(loss);
      adam_step(alpha, aopt);
      zero_grads(alpha);
      set_trainable(weights, true);
      res.val_trace.push_back(loss.item());
    }
  }
  for (const auto& a : alpha) {
    const auto d = a.data();
    res.genome.push_back(static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin()));
    res.alpha.emplace_back(d.begin(), d.end());
  }
  if (alpha_io) *alpha_io = alpha;
  return res;
}

// ---------------------------------------------------------------------------
// ENAS

void enas_child_step(Network& supernet, const ArchGenome& genome, const ArchTask& task, AdamState& opt,
                     std::size_t step) {
  auto params = supernet.parameters();
  zero_grads(params);
  Forward f = [&](const Tensor& x) { return supernet.forward(x, genome); };
  Tensor loss = task.train_loss(f, step);
  if (!std::isfinite(loss.item())) throw DivergenceError("enas: non-finite child loss at step " + std::to_string(step));
  backward(loss);
  adam_step(params, opt);
  zero_grads(params);
}

ArchSearchResult enas_search(Network& supernet, const ArchTask& task, const EnasConfig& config) {
  const auto& space = supernet.space();
  ControllerConfig cc = config.controller;
  cc.seed = derive_seed(config.seed, "controller", cc.seed);
  Controller controller(space.slot_sizes(), cc);
  Rng rng(derive_seed(config.seed, "enas-sample"));
  AdamState opt;
  opt.lr = config.weight_lr;
  ArchSearchResult res;
  std::size_t step = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t c = 0; c < config.child_steps; ++c) {
      enas_child_step(supernet, controller.sample(rng).genome, task, opt, step++);
    }
    double mean_reward = 0.0;
    for (std::size_t m = 0; m < config.controller_samples; ++m) {
      ArchGenome g = controller.sample(rng).genome;
      double err;
      {
        NoGradGuard guard;
        err = task.val_error([&](const Tensor& x) { return supernet.forward(x, g); });
      }
      const double r = reward_from_error(err);
      controller.update(g, r);
      mean_reward += r / static_cast<double>(config.controller_samples);
      ArchTrial t;
      t.index = res.trials.size();
      t.genome = g;
      t.error = err;
      t.reward = r;
      t.status = std::isfinite(err) ? ArchTrialStatus::completed : ArchTrialStatus::diverged;
      res.trials.push_back(std::move(t));
    }
    res.trace.push_back(mean_reward);
  }
  res.best = controller.argmax();
  NoGradGuard guard;
  res.best_error = task.val_error([&](const Tensor& x) { return supernet.forward(x, res.best); });
  return res;
}

}  // namespace picnn
