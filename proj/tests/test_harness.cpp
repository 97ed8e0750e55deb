#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "picnn/error.hpp"
#include "picnn/harness.hpp"
#include "picnn/ops.hpp"
#include "picnn/optim.hpp"
#include "test_util.hpp"

using namespace picnn;
using picnn::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

DatasetSpec tiny_poisson() {
  DatasetSpec s = DatasetSpec::defaults(PdeKind::poisson);
  s.grf = {1.0, 0.5, 4, 8, 8};
  s.counts = {4, 2, 2};
  s.seed = 3;
  return s;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.dataset = tiny_poisson();
  c.seed = 11;
  c.space = SpaceKind::cnn_stack;
  c.loss_search.budget = 1;
  c.loss_search.initial_random = 1;
  c.loss_search.epochs = 1;
  c.arch_search.budget = 1;
  c.arch_search.epochs = 1;
  c.training.epochs = 3;
  c.training.batch_size = 2;
  c.output_dir = out;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("picnn_harness_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("relative_l2 and mae on small examples") {
  Tensor a = Tensor::from({2}, {1.0, 0.0});
  Tensor b = Tensor::from({2}, {0.0, 1.0});
  CHECK(relative_l2(a, b) == doctest::Approx(std::sqrt(2.0)));
  Tensor t = Tensor::from({3}, {1.0, -2.0, 0.5});
  Tensor twice = Tensor::from({3}, {2.0, -4.0, 1.0});
  CHECK(relative_l2(twice, t) == doctest::Approx(1.0));
  CHECK(mae(Tensor::from({2}, {1.0, 3.0}), Tensor::from({2}, {0.0, 0.0})) == doctest::Approx(2.0));
  CHECK(relative_l2(t, t) == 0.0);
}

TEST_CASE("metric errors") {
  CHECK_THROWS_AS(relative_l2(Tensor::from({2}, {1.0, 1.0}), Tensor::zeros({2})), std::domain_error);
  CHECK_THROWS_AS(relative_l2(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(mae(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(metric_from_string("rmse"), ConfigError);
}

TEST_CASE("relative_l2 is scale invariant and mae translation invariant") {
  std::mt19937_64 rng(5);
  Tensor p = random_tensor({1, 1, 6, 6}, rng);
  Tensor t = random_tensor({1, 1, 6, 6}, rng);
  for (double c : {0.01, 3.0, -7.5}) {
    Tensor pc = p.detach();
    Tensor tc = t.detach();
    for (auto& v : pc.mutable_data()) v *= c;
    for (auto& v : tc.mutable_data()) v *= c;
    CHECK(relative_l2(pc, tc) == doctest::Approx(relative_l2(p, t)).epsilon(1e-12));
    Tensor ps = p.detach();
    Tensor ts = t.detach();
    for (auto& v : ps.mutable_data()) v += c;
    for (auto& v : ts.mutable_data()) v += c;
    CHECK(mae(ps, ts) == doctest::Approx(mae(p, t)).epsilon(1e-12));
  }
}

TEST_CASE("loss weights scaled together keep the argmin over candidate outputs") {
  Dataset ds = generate_dataset(tiny_poisson());
  std::vector<const GridSample*> batch{&ds.train[0]};
  std::mt19937_64 rng(9);
  std::vector<Tensor> outputs;
  for (int k = 0; k < 6; ++k) outputs.push_back(random_tensor({1, 1, 8, 8}, rng));
  LossGenome g = LossGenome::vanilla();
  LossGenome scaled = g;
  scaled.lambda_r *= 4.0;
  scaled.lambda_b *= 4.0;
  LossEvaluator a(g, PdeKind::poisson), b(scaled, PdeKind::poisson);
  std::vector<double> la, lb;
  for (const auto& y : outputs) {
    WeightState s1, s2;
    la.push_back(a(y, batch, {}, s1).total.item());
    lb.push_back(b(y, batch, {}, s2).total.item());
    CHECK(lb.back() == doctest::Approx(4.0 * la.back()).epsilon(1e-12));
  }
  CHECK(std::min_element(la.begin(), la.end()) - la.begin() == std::min_element(lb.begin(), lb.end()) - lb.begin());
}

TEST_CASE("zero epochs leaves the network unchanged") {
  ExperimentData data(generate_dataset(tiny_poisson()));
  SearchSpace space = SearchSpace::make(SpaceKind::cnn_stack);
  Network net = Network::build(space, ArchGenome(space.slots.size(), 0), network_options(data, 1));
  std::vector<std::vector<double>> before;
  for (const auto& p : net.parameters()) before.emplace_back(p.data().begin(), p.data().end());
  TrainingConfig cfg;
  cfg.epochs = 0;
  LossEvaluator loss(LossGenome::vanilla(), PdeKind::poisson);
  TrainResult r = train(net, loss, data.train(), data.val(), cfg, Metric::relative_l2, 2);
  CHECK(r.trace.empty());
  CHECK(r.status == TrainStatus::completed);
  auto after = net.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    CHECK(std::equal(before[i].begin(), before[i].end(), after[i].data().begin()));
}

TEST_CASE("full-batch training lowers the loss every epoch") {
  ExperimentData data(generate_dataset(tiny_poisson()));
  SearchSpace space = SearchSpace::make(SpaceKind::cnn_stack);
  Network net = Network::build(space, ArchGenome(space.slots.size(), 0), network_options(data, 4));
  TrainingConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  LossEvaluator loss(LossGenome::hard_baseline(), PdeKind::poisson);
  TrainResult r = train(net, loss, data.train(), data.val(), cfg, Metric::relative_l2, 2);
  REQUIRE(r.trace.size() == 15);
  for (std::size_t e = 1; e < r.trace.size(); ++e) {
    CHECK(r.trace[e].train_loss < r.trace[e - 1].train_loss);
    CHECK(r.trace[e].epoch == e + 1);
  }
  CHECK(std::isfinite(r.trace.back().val_metric));
}

TEST_CASE("training is deterministic and early stop is honoured") {
  ExperimentData data(generate_dataset(tiny_poisson()));
  SearchSpace space = SearchSpace::make(SpaceKind::cnn_stack);
  TrainingConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  LossEvaluator loss(LossGenome::vanilla(), PdeKind::poisson);
  auto run = [&] {
    Network net = Network::build(space, ArchGenome(space.slots.size(), 1), network_options(data, 8));
    return train(net, loss, data.train(), data.val(), cfg, Metric::mae, 6);
  };
  TrainResult a = run(), b = run();
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].train_loss == b.trace[i].train_loss);
    CHECK(a.trace[i].val_metric == b.trace[i].val_metric);
  }
  Network net = Network::build(space, ArchGenome(space.slots.size(), 1), network_options(data, 8));
  TrainResult s = train(net, loss, data.train(), data.val(), cfg, Metric::mae, 6,
                        [](const EpochRecord& r) { return r.epoch == 2; });
  CHECK(s.status == TrainStatus::stopped);
  CHECK(s.trace.size() == 2);
}

TEST_CASE("parameters round trip through a file") {
  ExperimentData data(generate_dataset(tiny_poisson()));
  SearchSpace space = SearchSpace::make(SpaceKind::cnn_stack);
  ArchGenome g(space.slots.size(), 0);
  Network a = Network::build(space, g, network_options(data, 1));
  Network b = Network::build(space, g, network_options(data, 2));
  fs::path dir = scratch_dir("params");
  save_parameters(a, dir / "p.ptns");
  load_parameters(b, dir / "p.ptns");
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
  Network other = Network::build(space, ArchGenome(space.slots.size(), 2), network_options(data, 1));
  if (other.parameter_count() != a.parameter_count()) CHECK_THROWS_AS(load_parameters(other, dir / "p.ptns"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("report round trip and curves file") {
  MetricsReport r;
  r.problem = "poisson";
  r.metric = "relative_l2";
  r.train = 0.1;
  r.val = 0.2;
  r.test = 0.30000000000000004;
  r.seconds = 1.5;
  for (std::size_t e = 1; e <= 7; ++e) r.trace.push_back({e, 1.0 / static_cast<double>(e), 0.5});
  r.loss_genome = LossGenome::vanilla();
  fs::path dir = scratch_dir("report");
  report_emit(r, dir);
  MetricsReport back = read_report(dir);
  CHECK(back.test == r.test);
  CHECK(back.trace.size() == 7);
  CHECK(back.trace[2].train_loss == r.trace[2].train_loss);
  CHECK(back.loss_genome.get<LossGenome>() == LossGenome::vanilla());

  std::ifstream in(dir / "curves.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_metric");
  std::size_t rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  CHECK(rows == 7);
  fs::remove_all(dir);
}

TEST_CASE("test split is closed while a search runs") {
  CHECK_NOTHROW(FinalEvaluation::open());
  {
    SearchScope scope;
    CHECK(SearchScope::active());
    CHECK_THROWS_AS(FinalEvaluation::open(), std::logic_error);
  }
  CHECK_FALSE(SearchScope::active());
  CHECK_NOTHROW(FinalEvaluation::open());
}

TEST_CASE("config validation") {
  ExperimentConfig c = tiny_config("unused");
  CHECK_NOTHROW(c.validate());
  auto bad = [&](auto mutate) {
    ExperimentConfig d = c;
    mutate(d);
    CHECK_THROWS_AS(d.validate(), ConfigError);
  };
  bad([](ExperimentConfig& d) { d.loss_search.budget = 0; });
  bad([](ExperimentConfig& d) { d.arch_search.budget = 0; });
  bad([](ExperimentConfig& d) { d.training.batch_size = 0; });
  bad([](ExperimentConfig& d) { d.training.lr = -1.0; });
  bad([](ExperimentConfig& d) { d.training.optimizer = "sgd"; });
  bad([](ExperimentConfig& d) { d.dataset_dir = "/nonexistent/picnn"; });
  bad([](ExperimentConfig& d) { d.dataset.grf.n_modes = 0; });

  nlohmann::json j = c;
  ExperimentConfig back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);
  j["unexpected"] = 1;
  CHECK_THROWS_AS(j.get<ExperimentConfig>(), ConfigError);
  CHECK_THROWS_AS((nlohmann::json{{"seed", 1}}.get<ExperimentConfig>()), ConfigError);
  CHECK_THROWS_AS((nlohmann::json{{"problem", "poisson"}, {"metric", "rmse"}}.get<ExperimentConfig>()), ConfigError);
}

TEST_CASE("default networks") {
  SearchSpace cnn = SearchSpace::make(SpaceKind::cnn_stack);
  auto p = default_networks(PdeKind::poisson, cnn, 5, 1);
  REQUIRE(p.size() == 1);
  CHECK(p[0].space.kind == SpaceKind::unet_entire);
  CHECK(std::all_of(p[0].genome.begin(), p[0].genome.end(), [](std::size_t i) { return i == 0; }));
  auto h = default_networks(PdeKind::heat_annulus, cnn, 5, 1);
  CHECK(h.size() == 5);
  for (const auto& a : h) CHECK_NOTHROW(validate_genome(a.space, a.genome));
}

TEST_CASE("pipeline with unit budgets writes a complete run") {
  fs::path dir = scratch_dir("pipeline");
  PipelineResult r = two_stage_pipeline(tiny_config(dir));
  CHECK(r.report.status == "completed");
  CHECK(r.report.trace.size() == 3);
  CHECK(r.loss.trials.size() == 1);
  CHECK(r.arch.trials.size() == 1);
  CHECK(std::isfinite(r.report.test));
  for (const char* f : {"manifest.json", "report.json", "curves.csv", "loss_genome.json", "architecture.json",
                        "model.ptns", "loss_trials.csv", "arch_trials.csv", "data/manifest.json"})
    CHECK_MESSAGE(fs::exists(dir / f), f);
  nlohmann::json m = read_json(dir / "manifest.json");
  CHECK(m.at("status") == "completed");
  CHECK(m.at("final_test_metric").get<double>() == r.report.test);

  fs::path again = scratch_dir("pipeline_rerun");
  PipelineResult r2 = rerun_from_manifest(dir / "manifest.json", again);
  CHECK(r2.report.test == r.report.test);
  CHECK(r2.report.val == r.report.val);
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST_CASE("one-shot strategies run through the pipeline") {
  for (ArchStrategy s : {ArchStrategy::enas, ArchStrategy::darts}) {
    fs::path dir = scratch_dir(std::string("oneshot_") + std::string(to_string(s)));
    ExperimentConfig c = tiny_config(dir);
    c.arch_search.strategy = s;
    c.arch_search.budget = 2;
    c.loss_search.fixed = LossGenome::hard_baseline();
    PipelineResult r = two_stage_pipeline(c);
    CHECK(r.loss.trials.empty());
    CHECK_NOTHROW(validate_genome(r.network.space, r.network.genome));
    CHECK(fs::exists(dir / "arch_trace.csv"));
    fs::remove_all(dir);
  }
}

TEST_CASE("pipeline failure keeps finished stages") {
  fs::path dir = scratch_dir("pipeline_fail");
  ExperimentConfig c = tiny_config(dir);
  c.training.lr = 1e12;
  c.loss_search.fixed = LossGenome::vanilla();
  c.arch_search.fixed = ArchSpec{SearchSpace::make(SpaceKind::cnn_stack), ArchGenome(7, 0)};
  c.training.epochs = 30;
  try {
    two_stage_pipeline(c);
  } catch (const DivergenceError&) {
    nlohmann::json m = read_json(dir / "manifest.json");
    CHECK(m.at("status") == "failed");
    CHECK(m.at("failed_stage") == "final_training");
    CHECK(fs::exists(dir / "loss_genome.json"));
    CHECK(read_report(dir).status == "diverged");
  }
  fs::remove_all(dir);
}

TEST_CASE("linear regression as a 1x1 conv descends monotonically") {
  std::vector<double> xs, ys;
  for (int i = 0; i < 20; ++i) {
    const double x = -1.0 + 0.1 * i;
    xs.push_back(x);
    ys.push_back(2.0 * x + 0.5);
  }
  Tensor x = Tensor::from({1, 1, 1, 20}, xs);
  Tensor y = Tensor::from({1, 1, 1, 20}, ys);
  Tensor w = Tensor::from({1, 1, 1, 1}, {0.0});
  Tensor b = Tensor::from({1}, {0.0});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  std::vector<Tensor> params{w, b};
  double prev = INFINITY;
  for (int step = 0; step < 400; ++step) {
    Tensor loss = mean(pow2(sub(conv2d(x, w, b), y)));
    const double v = loss.item();
    CHECK(v < prev);
    prev = v;
    backward(loss);
    sgd_step(params, 0.05);
    zero_grads(params);
  }
  CHECK(w.data()[0] == doctest::Approx(2.0).epsilon(1e-2));
  CHECK(b.data()[0] == doctest::Approx(0.5).epsilon(1e-2));
}

TEST_CASE("epoch presets") {
  CHECK(default_epochs(PdeKind::heat_annulus) == 2000);
  CHECK(default_epochs(PdeKind::poisson) == 2000);
  CHECK(default_epochs(PdeKind::darcy) == 1000);
  CHECK(default_epochs(PdeKind::heat_annulus, true) == 1000);
  CHECK(default_epochs(PdeKind::poisson, true) == 10000);
  CHECK(default_epochs(PdeKind::darcy, true) == 300);
  nlohmann::json j{{"problem", "darcy"}};
  CHECK(j.get<ExperimentConfig>().training.epochs == 1000);
}
