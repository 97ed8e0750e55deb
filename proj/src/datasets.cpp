#include "picnn/datasets.hpp"

#include <cmath>
#include <fstream>

#include "picnn/error.hpp"
#include "picnn/solvers.hpp"
#include "picnn/tensor_io.hpp"
#include "picnn/util.hpp"

namespace picnn {

namespace {

constexpr int kManifestVersion = 1;

Tensor stack_samples(const std::vector<GridSample>& samples, bool inputs) {
  if (samples.empty()) return Tensor::zeros({0, 1, 0, 0});
  const Tensor& first = inputs ? samples.front().input : samples.front().reference;
  Shape shape = first.shape();
  shape[0] = samples.size();
  std::vector<double> data;
  data.reserve(numel(shape));
  for (const auto& s : samples) {
    const Tensor& t = inputs ? s.input : s.reference;
    if (t.dim(1) != first.dim(1) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3)) {
      throw ShapeError("dataset split mixes sample shapes");
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from(std::move(shape), std::move(data));
}

Tensor batch_item(const Tensor& batch, std::size_t k) {
  const std::size_t per = batch.numel() / batch.dim(0);
  Shape shape = batch.shape();
  shape[0] = 1;
  const auto begin = batch.data().begin() + static_cast<std::ptrdiff_t>(k * per);
  return Tensor::from(std::move(shape), std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per)));
}

nlohmann::json counts_json(const SplitCounts& c) {
  return {{"train", c.train}, {"val", c.val}, {"test", c.test}};
}

}  // namespace

std::string_view to_string(SplitName s) {
  switch (s) {
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::test: return "test";
  }
  return "?";
}

std::vector<GridSample>& Dataset::split(SplitName s) {
  return s == SplitName::train ? train : s == SplitName::val ? val : test;
}

const std::vector<GridSample>& Dataset::split(SplitName s) const {
  return s == SplitName::train ? train : s == SplitName::val ? val : test;
}

DatasetSpec DatasetSpec::defaults(PdeKind problem) {
  DatasetSpec s;
  s.problem = problem;
  switch (problem) {
    case PdeKind::heat_annulus:
      s.counts = {s.annulus.t_in_train.size(), s.annulus.t_in_val.size(), s.annulus.t_in_test.size()};
      break;
    case PdeKind::poisson:
      s.grf = {1.0, 0.5, 10, 30, 30};
      s.counts = {64, 16, 64};
      break;
    case PdeKind::darcy:
      s.grf = {1.0, 0.25, 64, 32, 32};
      s.counts = {128, 32, 64};
      break;
  }
  return s;
}

void DatasetSpec::validate() const {
  if (problem == PdeKind::heat_annulus) {
    if (!(annulus.r_inner > 0.0 && annulus.r_outer > annulus.r_inner)) {
      throw ConfigError("annulus radii must satisfy 0 < r_inner < r_outer");
    }
    if (annulus.n_rho < 3 || annulus.n_theta < 3) throw ConfigError("annulus grid must be at least 3x3");
    if (annulus.t_in_train.empty()) throw ConfigError("annulus needs at least one training temperature");
    return;
  }
  grf.validate();
  if (grf.h < 3 || grf.w < 3) throw ConfigError("dataset grid must be at least 3x3");
  if (counts.train == 0) throw ConfigError("dataset needs at least one training sample");
  if (!(solver_tol > 0.0)) throw ConfigError("solver tolerance must be positive");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"problem", to_string(s.problem)},
                     {"seed", s.seed},
                     {"counts", counts_json(s.counts)},
                     {"solver_tol", s.solver_tol}};
  switch (s.problem) {
    case PdeKind::heat_annulus:
      j["annulus"] = {{"r_inner", s.annulus.r_inner},       {"r_outer", s.annulus.r_outer},
                      {"center", {s.annulus.center_x, s.annulus.center_y}},
                      {"n_rho", s.annulus.n_rho},           {"n_theta", s.annulus.n_theta},
                      {"t_out", s.annulus.t_out},           {"t_in_train", s.annulus.t_in_train},
                      {"t_in_val", s.annulus.t_in_val},     {"t_in_test", s.annulus.t_in_test}};
      break;
    case PdeKind::poisson:
      j["grf"] = s.grf;
      j["boundary_value"] = s.boundary_value;
      break;
    case PdeKind::darcy:
      j["grf"] = s.grf;
      j["u_left"] = s.u_left;
      j["u_right"] = s.u_right;
      break;
  }
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  try {
    s = DatasetSpec::defaults(pde_kind_from_string(j.at("problem").get<std::string>()));
    s.seed = j.value("seed", s.seed);
    s.solver_tol = j.value("solver_tol", s.solver_tol);
    if (j.contains("grf")) from_json(j.at("grf"), s.grf);
    s.boundary_value = j.value("boundary_value", s.boundary_value);
    s.u_left = j.value("u_left", s.u_left);
    s.u_right = j.value("u_right", s.u_right);
    if (j.contains("annulus")) {
      const auto& a = j.at("annulus");
      s.annulus.r_inner = a.value("r_inner", s.annulus.r_inner);
      s.annulus.r_outer = a.value("r_outer", s.annulus.r_outer);
      if (a.contains("center")) {
        s.annulus.center_x = a.at("center").at(0).get<double>();
        s.annulus.center_y = a.at("center").at(1).get<double>();
      }
      s.annulus.n_rho = a.value("n_rho", s.annulus.n_rho);
      s.annulus.n_theta = a.value("n_theta", s.annulus.n_theta);
      s.annulus.t_out = a.value("t_out", s.annulus.t_out);
      s.annulus.t_in_train = a.value("t_in_train", s.annulus.t_in_train);
      s.annulus.t_in_val = a.value("t_in_val", s.annulus.t_in_val);
      s.annulus.t_in_test = a.value("t_in_test", s.annulus.t_in_test);
    }
    if (s.problem == PdeKind::heat_annulus) {
      s.counts = {s.annulus.t_in_train.size(), s.annulus.t_in_val.size(), s.annulus.t_in_test.size()};
    } else if (j.contains("counts")) {
      const auto& c = j.at("counts");
      s.counts.train = c.value("train", s.counts.train);
      s.counts.val = c.value("val", s.counts.val);
      s.counts.test = c.value("test", s.counts.test);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset spec: ") + e.what());
  }
}

std::uint64_t spec_hash(const DatasetSpec& spec) { return fnv1a64(nlohmann::json(spec).dump()); }

BoundarySpec annulus_boundary(const AnnulusSpec& spec, double t_in) {
  BoundarySpec bc;
  bc.geometry = GridGeometry::annulus(spec.r_inner, spec.r_outer, spec.n_rho, spec.n_theta);
  bc.edge(Edge::top) = EdgeCondition::dirichlet(std::vector<double>(spec.n_theta, t_in));
  bc.edge(Edge::bottom) = EdgeCondition::dirichlet(std::vector<double>(spec.n_theta, spec.t_out));
  bc.edge(Edge::left) = EdgeCondition::periodic();
  bc.edge(Edge::right) = EdgeCondition::periodic();
  return bc;
}

BoundarySpec poisson_boundary(std::size_t h, std::size_t w, double value) {
  BoundarySpec bc;
  bc.geometry = GridGeometry::cartesian(1.0 / static_cast<double>(w - 1), 1.0 / static_cast<double>(h - 1));
  bc.edge(Edge::top) = EdgeCondition::dirichlet(std::vector<double>(w, value));
  bc.edge(Edge::bottom) = EdgeCondition::dirichlet(std::vector<double>(w, value));
  bc.edge(Edge::left) = EdgeCondition::dirichlet(std::vector<double>(h, value));
  bc.edge(Edge::right) = EdgeCondition::dirichlet(std::vector<double>(h, value));
  return bc;
}

BoundarySpec darcy_boundary(std::size_t h, std::size_t w, double u_left, double u_right) {
  BoundarySpec bc;
  bc.geometry = GridGeometry::cartesian(1.0 / static_cast<double>(w - 1), 1.0 / static_cast<double>(h - 1));
  bc.edge(Edge::top) = EdgeCondition::neumann(std::vector<double>(w, 0.0));
  bc.edge(Edge::bottom) = EdgeCondition::neumann(std::vector<double>(w, 0.0));
  bc.edge(Edge::left) = EdgeCondition::dirichlet(std::vector<double>(h, u_left));
  bc.edge(Edge::right) = EdgeCondition::dirichlet(std::vector<double>(h, u_right));
  return bc;
}

double annulus_temperature(const AnnulusSpec& spec, double t_in, double rho) {
  return spec.t_out + (t_in - spec.t_out) * std::log(spec.r_outer / rho) / std::log(spec.r_outer / spec.r_inner);
}

std::vector<GridSample> gen_heat_annulus(const AnnulusSpec& spec, const std::vector<double>& t_in) {
  const std::size_t h = spec.n_rho, w = spec.n_theta;
  const double r = spec.r_inner, R = spec.r_outer;
  std::vector<GridSample> out;
  for (double t : t_in) {
    GridSample s;
    s.bc = annulus_boundary(spec, t);
    std::vector<double> input(h * w), reference(h * w);
    for (std::size_t i = 0; i < h; ++i) {
      const double rho = i + 1 == h ? R : r + static_cast<double>(i) * s.bc.geometry.hy;
      const double lin = t + (spec.t_out - t) * (rho - r) / (R - r);
      const double exact = annulus_temperature(spec, t, rho);
      std::fill_n(input.begin() + static_cast<std::ptrdiff_t>(i * w), w, lin);
      std::fill_n(reference.begin() + static_cast<std::ptrdiff_t>(i * w), w, exact);
    }
    s.input = Tensor::from({1, 1, h, w}, std::move(input));
    s.reference = Tensor::from({1, 1, h, w}, std::move(reference));
    out.push_back(std::move(s));
  }
  return out;
}

Dataset gen_heat_dataset(const AnnulusSpec& spec) {
  Dataset d;
  d.spec = DatasetSpec::defaults(PdeKind::heat_annulus);
  d.spec.annulus = spec;
  d.spec.counts = {spec.t_in_train.size(), spec.t_in_val.size(), spec.t_in_test.size()};
  d.train = gen_heat_annulus(spec, spec.t_in_train);
  d.val = gen_heat_annulus(spec, spec.t_in_val);
  d.test = gen_heat_annulus(spec, spec.t_in_test);
  return d;
}

Dataset gen_poisson_dataset(const GrfSpec& grf, SplitCounts counts, std::uint64_t seed,
                            double boundary_value, double solver_tol) {
  Dataset d;
  d.spec = DatasetSpec::defaults(PdeKind::poisson);
  d.spec.grf = grf;
  d.spec.counts = counts;
  d.spec.seed = seed;
  d.spec.boundary_value = boundary_value;
  d.spec.solver_tol = solver_tol;
  d.spec.validate();

  const KlExpansion kl = kl_expansion(grf);
  const BoundarySpec bc = poisson_boundary(grf.h, grf.w, boundary_value);
  std::uint64_t index = 0;
  for (SplitName split : kAllSplits) {
    const std::size_t n = split == SplitName::train ? counts.train : split == SplitName::val ? counts.val : counts.test;
    for (std::size_t k = 0; k < n; ++k) {
      Rng rng(derive_seed(seed, "poisson", index++));
      GridSample s;
      s.input = sample_grf(kl, rng);
      s.reference = solve_poisson_fd(s.input, bc, solver_tol);
      s.bc = bc;
      d.split(split).push_back(std::move(s));
    }
  }
  return d;
}

Dataset gen_darcy_dataset(const GrfSpec& grf, SplitCounts counts, std::uint64_t seed, double u_left,
                          double u_right, double solver_tol) {
  Dataset d;
  d.spec = DatasetSpec::defaults(PdeKind::darcy);
  d.spec.grf = grf;
  d.spec.counts = counts;
  d.spec.seed = seed;
  d.spec.u_left = u_left;
  d.spec.u_right = u_right;
  d.spec.solver_tol = solver_tol;
  d.spec.validate();

  const KlExpansion kl = kl_expansion(grf);
  const BoundarySpec bc = darcy_boundary(grf.h, grf.w, u_left, u_right);
  std::uint64_t index = 0;
  for (SplitName split : kAllSplits) {
    const std::size_t n = split == SplitName::train ? counts.train : split == SplitName::val ? counts.val : counts.test;
    for (std::size_t k = 0; k < n; ++k) {
      Rng rng(derive_seed(seed, "darcy", index++));
      GridSample s;
      Tensor log_k = sample_grf(kl, rng);
      std::vector<double> K(log_k.numel());
      for (std::size_t p = 0; p < K.size(); ++p) K[p] = std::exp(log_k.at(p));
      s.input = Tensor::from(log_k.shape(), std::move(K));
      s.reference = solve_darcy_fv(s.input, bc, solver_tol);
      s.bc = bc;
      d.split(split).push_back(std::move(s));
    }
  }
  return d;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  switch (spec.problem) {
    case PdeKind::heat_annulus: {
      Dataset d = gen_heat_dataset(spec.annulus);
      d.spec = spec;
      return d;
    }
    case PdeKind::poisson:
      return gen_poisson_dataset(spec.grf, spec.counts, spec.seed, spec.boundary_value, spec.solver_tol);
    case PdeKind::darcy:
      return gen_darcy_dataset(spec.grf, spec.counts, spec.seed, spec.u_left, spec.u_right, spec.solver_tol);
  }
  throw std::logic_error("unreachable");
}

nlohmann::json split_and_serialize(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  nlohmann::json manifest{{"format_version", kManifestVersion},
                          {"problem", to_string(dataset.spec.problem)},
                          {"seed", dataset.spec.seed},
                          {"spec", dataset.spec},
                          {"spec_hash", hex64(spec_hash(dataset.spec))}};
  nlohmann::json counts, files, boundaries;
  for (SplitName split : kAllSplits) {
    const auto& samples = dataset.split(split);
    const std::string name(to_string(split));
    counts[name] = samples.size();
    nlohmann::json bcs = nlohmann::json::array();
    for (const auto& s : samples) bcs.push_back(s.bc);
    boundaries[name] = std::move(bcs);
    if (samples.empty()) continue;
    for (bool inputs : {true, false}) {
      const std::string file = name + (inputs ? "_inputs.ptns" : "_references.ptns");
      write_tensor(dir / file, stack_samples(samples, inputs));
      files[file] = hex64(file_hash(dir / file));
    }
  }
  manifest["counts"] = std::move(counts);
  manifest["files"] = std::move(files);
  manifest["boundary"] = std::move(boundaries);

  const auto path = dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
  return manifest;
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset manifest " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest " + path.string() + ": " + e.what());
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  Dataset d;
  try {
    d.spec = manifest.at("spec").get<DatasetSpec>();
    for (SplitName split : kAllSplits) {
      const std::string name(to_string(split));
      const std::size_t n = manifest.at("counts").at(name).get<std::size_t>();
      if (n == 0) continue;
      Tensor batch[2];
      for (int role = 0; role < 2; ++role) {
        const std::string file = name + (role == 0 ? "_inputs.ptns" : "_references.ptns");
        const auto path = dir / file;
        if (hex64(file_hash(path)) != manifest.at("files").at(file).get<std::string>()) {
          throw IoError("dataset file " + path.string() + " does not match its manifest hash");
        }
        batch[role] = read_tensor(path);
        if (batch[role].ndim() != 4 || batch[role].dim(0) != n) {
          throw IoError("dataset file " + path.string() + " holds " + shape_str(batch[role].shape()) +
                        ", manifest lists " + std::to_string(n) + " samples");
        }
      }
      const auto& bcs = manifest.at("boundary").at(name);
      for (std::size_t k = 0; k < n; ++k) {
        GridSample s;
        s.input = batch_item(batch[0], k);
        s.reference = batch_item(batch[1], k);
        s.bc = bcs.at(k).get<BoundarySpec>();
        d.split(split).push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  return d;
}

}  // namespace picnn
