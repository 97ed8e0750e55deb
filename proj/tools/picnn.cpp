// picnn command-line driver.
#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "picnn/error.hpp"
#include "picnn/harness.hpp"
#include "picnn/util.hpp"

using namespace picnn;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDiverged = 3, kIo = 4 };

struct Options {
  std::string config, manifest, out, problem, loss, arch, model, run;
  std::string strategy, space, split = "test", metric;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> budget, workers, epochs;
  bool full_scale = false;
};

LossGenome read_loss(const std::string& path) {
  try {
    return read_json(path).get<LossGenome>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ArchSpec read_arch(const std::string& path) {
  try {
    return read_json(path).get<ArchSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

SpaceKind space_from_flag(const std::string& s) {
  if (s == "cnn") return SpaceKind::cnn_stack;
  if (s == "unet") return SpaceKind::unet_entire;
  if (s == "cell") return SpaceKind::unet_cell;
  return space_kind_from_string(s);
}

ExperimentConfig config_from(const Options& o) {
  ExperimentConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (!o.problem.empty()) {
    c = json{{"problem", o.problem}}.get<ExperimentConfig>();
  } else {
    throw ConfigError("either --config or --problem is required");
  }
  if (o.seed) {
    c.seed = *o.seed;
    c.dataset.seed = *o.seed;
  }
  if (o.full_scale) c.training.epochs = default_epochs(c.dataset.problem, true);
  if (o.epochs) c.training.epochs = *o.epochs;
  if (!o.metric.empty()) c.metric = metric_from_string(o.metric);
  if (!o.space.empty()) c.space = space_from_flag(o.space);
  if (!o.strategy.empty()) c.arch_search.strategy = arch_strategy_from_string(o.strategy);
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  return c;
}

void print_report(const MetricsReport& r) {
  std::printf("problem   %s\nmetric    %s\nstatus    %s\n", r.problem.c_str(), r.metric.c_str(), r.status.c_str());
  std::printf("train     %.6g\nval       %.6g\ntest      %.6g\n", r.train, r.val, r.test);
  std::printf("epochs    %zu\nseconds   %.1f\n", r.trace.size(), r.seconds);
  if (!r.trace.empty())
    std::printf("last      train_loss %.6g val_metric %.6g\n", r.trace.back().train_loss, r.trace.back().val_metric);
}

int cmd_generate(const Options& o) {
  ExperimentConfig c = config_from(o);
  if (o.out.empty()) throw ConfigError("--out is required");
  Dataset d = generate_dataset(c.dataset);
  json m = split_and_serialize(d, o.out);
  std::printf("wrote %s (%zu train, %zu val, %zu test)\n", o.out.c_str(), d.train.size(), d.val.size(), d.test.size());
  return kOk;
}

int cmd_search_loss(const Options& o) {
  ExperimentConfig c = config_from(o);
  if (o.budget) c.loss_search.budget = *o.budget;
  if (o.workers) c.loss_search.workers = *o.workers;
  c.loss_search.fixed.reset();
  c.validate();
  ExperimentData data(load_or_generate(c));
  LossSearchResult r = run_loss_stage(data, c);
  write_text(c.output_dir / "loss_genome.json", json(r.best).dump(2) + "\n");
  write_text(c.output_dir / "loss_trials.csv", trials_csv(r.trials));
  std::printf("best loss %s\nvalidation error %.6g\n", r.best.key().c_str(), r.best_error);
  return kOk;
}

int cmd_search_arch(const Options& o) {
  ExperimentConfig c = config_from(o);
  if (o.budget) c.arch_search.budget = *o.budget;
  if (o.workers) c.arch_search.workers = *o.workers;
  c.arch_search.fixed.reset();
  c.validate();
  LossGenome loss = o.loss.empty() ? LossGenome::hard_baseline() : read_loss(o.loss);
  ExperimentData data(load_or_generate(c));
  ArchStageResult r = run_arch_stage(data, c, loss);
  write_text(c.output_dir / "architecture.json", json(r.network).dump(2) + "\n");
  if (!r.search.trials.empty())
    write_text(c.output_dir / "arch_trials.csv", arch_trials_csv(r.network.space, r.search.trials));
  std::printf("best architecture %s\n", genome_string(r.network.space, r.network.genome).c_str());
  if (std::isfinite(r.search.best_error)) std::printf("validation error %.6g\n", r.search.best_error);
  return kOk;
}

int cmd_train(const Options& o) {
  ExperimentConfig c = config_from(o);
  ExperimentData data(load_or_generate(c));
  LossGenome loss = o.loss.empty() ? LossGenome::hard_baseline() : read_loss(o.loss);
  ArchSpec arch;
  if (!o.arch.empty()) {
    arch = read_arch(o.arch);
  } else {
    arch.space = SearchSpace::make(c.space);
    arch.genome.assign(arch.space.slots.size(), 0);
  }
  LossEvaluator ev(loss, data.spec().problem);
  Network net = Network::build(arch.space, arch.genome, network_options(data, derive_seed(c.seed, "final-network")));
  TrainResult tr = train(net, ev, data.train(), data.val(), c.training, c.metric,
                         derive_seed(c.seed, "final-training"), [](const EpochRecord& e) {
                           if (e.epoch % 100 == 0)
                             std::fprintf(stderr, "epoch %zu train_loss %.6g val %.6g\n", e.epoch, e.train_loss,
                                          e.val_metric);
                           return false;
                         });
  MetricsReport r;
  r.problem = std::string(to_string(data.spec().problem));
  r.metric = std::string(to_string(c.metric));
  r.status = std::string(to_string(tr.status));
  r.trace = tr.trace;
  r.seconds = tr.seconds;
  r.loss_genome = loss;
  r.architecture = arch;
  r.test = std::nan("");
  if (tr.status == TrainStatus::diverged) {
    r.train = r.val = std::nan("");
    report_emit(r, c.output_dir);
    std::fprintf(stderr, "diverged: %s\n", tr.message.c_str());
    return kDiverged;
  }
  save_parameters(net, c.output_dir / "model.ptns");
  r.train = evaluate(net, ev, data.train(), c.metric);
  r.val = evaluate(net, ev, data.val(), c.metric);
  report_emit(r, c.output_dir);
  print_report(r);
  return kOk;
}

int cmd_evaluate(const Options& o) {
  ExperimentConfig c = config_from(o);
  if (o.model.empty() || o.arch.empty()) throw ConfigError("--model and --arch are required");
  ExperimentData data(load_or_generate(c));
  LossGenome loss = o.loss.empty() ? LossGenome::hard_baseline() : read_loss(o.loss);
  ArchSpec arch = read_arch(o.arch);
  Network net = Network::build(arch.space, arch.genome, network_options(data, 0));
  load_parameters(net, o.model);
  LossEvaluator ev(loss, data.spec().problem);
  double v = 0.0;
  if (o.split == "train") {
    v = evaluate(net, ev, data.train(), c.metric);
  } else if (o.split == "val") {
    v = evaluate(net, ev, data.val(), c.metric);
  } else {
    v = evaluate(net, ev, data.test(FinalEvaluation::open()), c.metric);
  }
  std::printf("%s %s %.17g\n", o.split.c_str(), std::string(to_string(c.metric)).c_str(), v);
  return kOk;
}

int cmd_pipeline(const Options& o) {
  PipelineResult r;
  if (!o.manifest.empty()) {
    fs::path out = o.out.empty() ? fs::path(o.manifest).parent_path() / "rerun" : fs::path(o.out);
    r = rerun_from_manifest(o.manifest, out);
  } else {
    r = two_stage_pipeline(config_from(o));
  }
  print_report(r.report);
  std::printf("loss      %s\narch      %s\n", r.loss.best.key().c_str(),
              genome_string(r.network.space, r.network.genome).c_str());
  return kOk;
}

int cmd_report(const Options& o) {
  if (o.run.empty()) throw ConfigError("--run is required");
  print_report(read_report(o.run));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Physics-informed CNN training with loss and architecture search"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--problem", o.problem, "heat_annulus, poisson or darcy, with default settings");
    sub->add_option("--seed", o.seed, "root seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--epochs", o.epochs, "training epochs");
    sub->add_option("--metric", o.metric, "relative_l2 or mae");
    sub->add_flag("--full-scale", o.full_scale, "use the full-scale epoch budget of the problem");
  };

  auto* gen = app.add_subcommand("generate-data", "generate and serialize a dataset");
  add_common(gen);
  auto* sl = app.add_subcommand("search-loss", "stage 1: Bayesian-optimization loss search");
  add_common(sl);
  sl->add_option("--budget", o.budget, "trials");
  sl->add_option("--workers", o.workers, "concurrent trials");
  sl->add_option("--space", o.space, "space of the default networks: cnn, unet or cell");
  auto* sa = app.add_subcommand("search-arch", "stage 2: architecture search under a fixed loss");
  add_common(sa);
  sa->add_option("--strategy", o.strategy, "rl, enas or darts")->check(CLI::IsMember({"rl", "enas", "darts"}));
  sa->add_option("--space", o.space, "cnn, unet or cell")->check(CLI::IsMember({"cnn", "unet", "cell"}));
  sa->add_option("--loss", o.loss, "loss genome file");
  sa->add_option("--budget", o.budget, "trials, iterations or steps");
  sa->add_option("--workers", o.workers, "concurrent trials (rl)");
  auto* tr = app.add_subcommand("train", "train one network with one loss");
  add_common(tr);
  tr->add_option("--loss", o.loss, "loss genome file (default: hard constraint)");
  tr->add_option("--arch", o.arch, "architecture file (default: first choices of --space)");
  tr->add_option("--space", o.space, "cnn, unet or cell");
  auto* ev = app.add_subcommand("evaluate", "evaluate a saved model on one split");
  add_common(ev);
  ev->add_option("--loss", o.loss, "loss genome file");
  ev->add_option("--arch", o.arch, "architecture file")->required();
  ev->add_option("--model", o.model, "parameter file")->required();
  ev->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* pl = app.add_subcommand("pipeline", "loss search, architecture search, retraining and test evaluation");
  add_common(pl);
  pl->add_option("--manifest", o.manifest, "rerun the config recorded in a manifest");
  pl->add_option("--strategy", o.strategy, "rl, enas or darts")->check(CLI::IsMember({"rl", "enas", "darts"}));
  pl->add_option("--space", o.space, "cnn, unet or cell")->check(CLI::IsMember({"cnn", "unet", "cell"}));
  auto* rp = app.add_subcommand("report", "print the report of a run directory");
  rp->add_option("--run", o.run, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*sl) return cmd_search_loss(o);
    if (*sa) return cmd_search_arch(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_evaluate(o);
    if (*pl) return cmd_pipeline(o);
    if (*rp) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}
