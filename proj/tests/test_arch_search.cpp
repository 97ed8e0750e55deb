#include <algorithm>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "picnn/arch.hpp"
#include "picnn/error.hpp"
#include "picnn/gradcheck.hpp"
#include "picnn/nas.hpp"
#include "picnn/ops.hpp"
#include "test_util.hpp"

using namespace picnn;
using picnn::testing::max_abs_diff;
using picnn::testing::random_tensor;

namespace {

ArchGenome random_genome(const SearchSpace& s, std::mt19937_64& rng) {
  ArchGenome g;
  for (std::size_t k : s.slot_sizes()) g.push_back(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
  return g;
}

bool bitwise_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    if (!std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin())) return false;
  }
  return true;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  for (const auto& t : ts) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(pow2(sub(a, b))); }

}  // namespace

TEST_CASE("standard spaces have the expected slots") {
  CHECK(SearchSpace::make(SpaceKind::cnn_stack).slots.size() == 7);
  CHECK(SearchSpace::make(SpaceKind::cnn_stack).slots[0].candidates.size() == 6);
  CHECK(SearchSpace::make(SpaceKind::cnn_stack, true).slots[0].candidates.size() == 4);
  CHECK(SearchSpace::make(SpaceKind::unet_entire).slots.size() == 20);
  CHECK(SearchSpace::make(SpaceKind::unet_cell).slots.size() == 6);
  nlohmann::json j = SearchSpace::make(SpaceKind::unet_entire);
  CHECK(j.get<SearchSpace>().slot_sizes() == SearchSpace::make(SpaceKind::unet_entire).slot_sizes());
  CHECK_THROWS_AS(space_kind_from_string("resnet"), ConfigError);
  CHECK(space_kind_from_string("cell") == SpaceKind::unet_cell);
}

TEST_CASE("all-first genomes map a 32x32 probe to 32x32") {
  for (auto kind : {SpaceKind::cnn_stack, SpaceKind::unet_entire, SpaceKind::unet_cell}) {
    const SearchSpace s = SearchSpace::make(kind);
    Network net = Network::build(s, ArchGenome(s.slots.size(), 0), {});
    Tensor y = net.forward(Tensor::zeros({1, 1, 32, 32}));
    CHECK(y.shape() == Shape{1, 1, 32, 32});
  }
}

TEST_CASE("random genomes preserve spatial shape on odd and wide grids") {
  std::mt19937_64 rng(5);
  for (auto kind : {SpaceKind::cnn_stack, SpaceKind::unet_entire, SpaceKind::unet_cell}) {
    const SearchSpace s = SearchSpace::make(kind);
    for (int t = 0; t < 4; ++t) {
      NetworkOptions o;
      o.seed = static_cast<std::uint64_t>(t);
      o.cols = t % 2 ? PadMode::circular : PadMode::zeros;
      Network net = Network::build(s, random_genome(s, rng), o);
      NoGradGuard guard;
      CHECK(net.forward(random_tensor({2, 1, 30, 30}, rng)).shape() == Shape{2, 1, 30, 30});
      CHECK(net.forward(random_tensor({1, 1, 32, 64}, rng)).shape() == Shape{1, 1, 32, 64});
    }
  }
}

TEST_CASE("cnn_stack parameter count matches the closed form") {
  const SearchSpace s = SearchSpace::make(SpaceKind::cnn_stack);
  Network net = Network::build(s, ArchGenome(7, 0), {});
  const std::vector<std::size_t> chain{1, 16, 32, 32, 16, 1};
  std::size_t expected = 0;
  for (std::size_t i = 0; i + 1 < chain.size(); ++i) expected += 9 * chain[i] * chain[i + 1] + chain[i + 1];
  CHECK(net.parameter_count() == expected);
}

TEST_CASE("same seed gives bitwise identical parameters, shared with the supernet") {
  const SearchSpace s = SearchSpace::make(SpaceKind::unet_entire);
  std::mt19937_64 rng(6);
  const ArchGenome g = random_genome(s, rng);
  NetworkOptions o;
  o.seed = 42;
  CHECK(bitwise_equal(Network::build(s, g, o).parameters(), Network::build(s, g, o).parameters()));
  Network super = Network::supernet(s, o);
  CHECK(bitwise_equal(Network::build(s, g, o).parameters(), super.parameters(g)));
  o.seed = 43;
  CHECK_FALSE(bitwise_equal(Network::build(s, g, o).parameters(), super.parameters(g)));
  CHECK_THROWS_AS(Network::build(s, ArchGenome(3, 0), o), ConfigError);
  CHECK_THROWS_AS(Network::build(s, ArchGenome(20, 9), o), ConfigError);
}

TEST_CASE("cell space repeats one cell at every stage") {
  const SearchSpace s = SearchSpace::make(SpaceKind::unet_cell);
  Network net = Network::build(s, {1, 2, 0, 1, 3, 2}, {});
  std::vector<std::vector<std::size_t>> down, up;
  for (const auto& site : net.sites()) {
    auto& group = site.slot < 3 ? down : up;
    if (group.size() < site.stage) group.resize(site.stage);
    group[site.stage - 1].push_back(site.slot);
  }
  REQUIRE(down.size() == 3);
  REQUIRE(up.size() == 3);
  for (const auto& stage : down) CHECK(stage == std::vector<std::size_t>{0, 1, 2});
  for (const auto& stage : up) CHECK(stage == std::vector<std::size_t>{3, 4, 5});
  CHECK(genome_from_json(s, genome_to_json(s, {1, 2, 0, 1, 3, 2})) == ArchGenome{1, 2, 0, 1, 3, 2});
}

TEST_CASE("reward is the reciprocal error") {
  CHECK(reward_from_error(0.05) == doctest::Approx(20.0));
  CHECK(reward_from_error(1.0) == 1.0);
  CHECK(reward_from_error(0.0) == doctest::Approx(1e8));
  CHECK(reward_from_error(INFINITY) == 0.0);
}

TEST_CASE("uniform controller samples uniformly") {
  Controller c({6, 3, 6});
  Rng rng(1);
  const std::size_t n = 10000;
  std::vector<std::vector<std::size_t>> counts{std::vector<std::size_t>(6), std::vector<std::size_t>(3),
                                               std::vector<std::size_t>(6)};
  for (std::size_t i = 0; i < n; ++i) {
    auto s = c.sample(rng);
    REQUIRE(s.log_probs.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) ++counts[k][s.genome[k]];
  }
  for (const auto& slot : counts) {
    const double p = 1.0 / static_cast<double>(slot.size());
    const double sigma = std::sqrt(static_cast<double>(n) * p * (1 - p));
    for (std::size_t v : slot) CHECK(std::abs(static_cast<double>(v) - static_cast<double>(n) * p) < 3 * sigma);
  }
  for (const auto& probs : c.probabilities({1, 2, 3})) {
    double sum = 0.0;
    for (double v : probs) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  CHECK(c.argmax() == c.argmax());
}

TEST_CASE("REINFORCE update contracts") {
  Controller c({4, 3});
  const auto before = snapshot(c.parameters());
  c.update({1, 2}, 5.0);  // seeds the baseline
  CHECK(snapshot(c.parameters()) == before);
  c.update({1, 2}, c.baseline());
  CHECK(snapshot(c.parameters()) == before);
  for (int i = 0; i < 10; ++i) c.update({0, 1}, 5.0);  // constant rewards
  CHECK(snapshot(c.parameters()) == before);

  const double lp = c.log_prob({3, 0}).item();
  CHECK(c.update({3, 0}, 10.0) > 0.0);
  CHECK(c.log_prob({3, 0}).item() > lp);
}

TEST_CASE("REINFORCE solves a two-armed bandit within 200 updates") {
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> best_prob;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ControllerConfig cfg;
    cfg.seed = seed;
    Controller c({2}, cfg);
    Rng rng(seed + 100);
    for (int step = 0; step < 200; ++step) {
      auto s = c.sample(rng);
      c.update(s.genome, s.genome[0] == 0 ? 1.0 : 0.1);
    }
    best_prob.push_back(c.probabilities({0})[0][0]);
  }
  std::sort(best_prob.begin(), best_prob.end());
  const double median = 0.5 * (best_prob[9] + best_prob[10]);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  MESSAGE("bandit median best-arm probability " << median << " in " << secs << " s");
  CHECK(median > 0.9);
  CHECK(secs < 10.0);
}

TEST_CASE("multi-trial search") {
  const SearchSpace s = SearchSpace::make(SpaceKind::cnn_stack);
  MultiTrialConfig cfg;
  cfg.budget = 1;
  auto one = multi_trial_search(s, [](const ArchGenome&) { return 0.3; }, cfg);
  REQUIRE(one.trials.size() == 1);
  CHECK(one.best == one.trials[0].genome);

  // planted genome on 7 binary slots; error is the Hamming distance to it
  const SearchSpace bin = SearchSpace::chain(std::vector<Slot>(7, Slot{"s", {OpKind::identity, OpKind::avgpool3}}), 1);
  std::vector<std::size_t> found_at;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const ArchGenome hidden = random_genome(bin, rng);
    cfg.budget = 60;
    cfg.seed = seed;
    auto res = multi_trial_search(
        bin,
        [&](const ArchGenome& g) {
          double d = 0;
          for (std::size_t i = 0; i < g.size(); ++i) d += g[i] != hidden[i];
          return d;
        },
        cfg);
    std::size_t at = 61;
    for (const auto& t : res.trials) {
      if (t.genome == hidden) {
        at = t.index + 1;
        break;
      }
    }
    found_at.push_back(at);
  }
  std::sort(found_at.begin(), found_at.end());
  const double median = 0.5 * static_cast<double>(found_at[4] + found_at[5]);
  MESSAGE("planted genome found after median " << median << " trials");
  CHECK(median <= 60);

  cfg.budget = 4;
  auto bad = multi_trial_search(
      s, [](const ArchGenome& g) -> double { if (g[0] % 2) throw DivergenceError("nan"); return 0.5; }, cfg);
  for (const auto& t : bad.trials) CHECK((t.status == ArchTrialStatus::diverged) == (t.genome[0] % 2 == 1));
  CHECK(arch_trials_csv(s, bad.trials).find("index,status") == 0);
}

TEST_CASE("DARTS mixture edge cases") {
  const SearchSpace s = SearchSpace::chain({{"op", {OpKind::identity, OpKind::maxpool3, OpKind::avgpool3, OpKind::conv3}}}, 1);
  Network net = Network::supernet(s, {});
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 1, 6, 6}, rng);

  auto probs = darts_probabilities({Tensor::zeros({4})});
  for (std::size_t k = 0; k < 4; ++k) CHECK(probs[0].at(k) == doctest::Approx(0.25).epsilon(1e-15));

  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> a(4, 0.0);
    a[k] = 1e4;
    Tensor mixed = net.forward_mixed(x, darts_probabilities({Tensor::from({4}, a)}));
    ArchGenome g{k};
    CHECK(max_abs_diff(mixed, net.forward(x, g)) < 1e-6);
  }

  Tensor target = random_tensor({2, 1, 6, 6}, rng);
  auto report = gradcheck(
      [&](const std::vector<Tensor>& in) { return mse(net.forward_mixed(x, darts_probabilities({in[0]})), target); },
      {random_tensor({4}, rng)});
  CHECK(report.worst() < 1e-6);
}

TEST_CASE("DARTS selects a planted identity op") {
  const SearchSpace s = SearchSpace::chain({{"op", {OpKind::maxpool3, OpKind::conv3, OpKind::identity, OpKind::avgpool3}}}, 1);
  Network net = Network::supernet(s, {});
  std::mt19937_64 rng(8);
  Tensor xt = random_tensor({4, 1, 8, 8}, rng), xv = random_tensor({4, 1, 8, 8}, rng);
  ArchTask task;
  task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(xt), xt); };
  task.val_loss = [&](const Forward& f, std::size_t) { return mse(f(xv), xv); };
  DartsConfig cfg;
  cfg.steps = 200;
  auto res = darts_search(net, task, cfg);
  CHECK(res.genome == ArchGenome{2});
  CHECK(res.max_normalization_error < 1e-9);
  CHECK(res.val_trace.back() < res.val_trace.front());
}

TEST_CASE("DARTS alpha step follows the per-op loss difference") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const SearchSpace s = SearchSpace::chain({{"op", {OpKind::maxpool3, OpKind::avgpool3}}}, 1);
    Network net = Network::supernet(s, {});
    Tensor x = random_tensor({1, 1, 6, 6}, rng), t = random_tensor({1, 1, 6, 6}, rng);
    ArchTask task;
    task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(x), t); };
    task.val_loss = task.train_loss;
    const double la = mse(net.forward(x, {0}), t).item(), lb = mse(net.forward(x, {1}), t).item();
    DartsConfig cfg;
    cfg.steps = 1;
    auto res = darts_search(net, task, cfg);
    CHECK((res.alpha[0][0] > res.alpha[0][1]) == (la < lb));
  }
}

TEST_CASE("ENAS child step only touches the activated subgraph") {
  const SearchSpace s = SearchSpace::make(SpaceKind::unet_cell, true);
  Network super = Network::supernet(s, {});
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({1, 1, 16, 16}, rng);
  ArchTask task;
  task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(x), x); };
  const ArchGenome g{0, 1, 3, 1, 0, 2};
  const auto all = super.parameters();
  const auto before = snapshot(all);
  const auto active = super.parameters(g);
  AdamState opt;
  enas_child_step(super, g, task, opt, 0);
  enas_child_step(super, g, task, opt, 1);
  std::size_t changed = 0, untouched = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const bool is_active = std::any_of(active.begin(), active.end(),
                                       [&](const Tensor& t) { return t.impl() == all[i].impl(); });
    const bool same = std::equal(before[i].begin(), before[i].end(), all[i].data().begin());
    if (is_active) {
      changed += !same;
    } else {
      CHECK(same);
      ++untouched;
    }
  }
  CHECK(changed > 0);
  CHECK(untouched > 0);
}

TEST_CASE("controller converges to a planted genome under per-op scores") {
  const SearchSpace s = SearchSpace::make(SpaceKind::cnn_stack, true);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 g_rng(seed + 11);
    const ArchGenome hidden = random_genome(s, g_rng);
    ControllerConfig cfg;
    cfg.seed = seed;
    Controller c(s.slot_sizes(), cfg);
    Rng rng(seed + 12);
    for (int step = 0; step < 400; ++step) {
      auto smp = c.sample(rng);
      // every wrong op adds its own fixed penalty to the error
      double error = 0.1;
      for (std::size_t i = 0; i < hidden.size(); ++i) {
        if (smp.genome[i] != hidden[i]) error += 0.1 * static_cast<double>(1 + (i * 7 + smp.genome[i]) % 5);
      }
      c.update(smp.genome, reward_from_error(error));
    }
    CHECK(c.argmax() == hidden);
  }
}

TEST_CASE("ENAS search runs end to end on a tiny chain") {
  const SearchSpace s = SearchSpace::chain(
      {{"a", {OpKind::maxpool3, OpKind::identity}}, {"b", {OpKind::avgpool3, OpKind::identity, OpKind::conv3}}}, 1);
  Network super = Network::supernet(s, {});
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({2, 1, 8, 8}, rng);
  ArchTask task;
  task.train_loss = [&](const Forward& f, std::size_t) { return mse(f(x), x); };
  task.val_error = [&](const Forward& f) { return std::sqrt(mse(f(x), x).item()) + 1e-3; };
  EnasConfig cfg;
  cfg.iterations = 150;
  cfg.controller_samples = 2;
  auto res = enas_search(super, task, cfg);
  CHECK(res.best == ArchGenome{1, 1});
  CHECK(res.trace.size() == 150);
}
