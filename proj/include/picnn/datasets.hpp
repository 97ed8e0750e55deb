#pragma once
/**
 * @file datasets.hpp
 * @brief Parametric PDE datasets: generation, serialization and loading.
 *
 * On disk a dataset is a directory holding manifest.json plus, for every
 * split, `<split>_inputs.ptns` [N,C,H,W] and `<split>_references.ptns` [N,1,H,W].
 */

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "picnn/boundary.hpp"
#include "picnn/grf.hpp"
#include "picnn/residual.hpp"
#include "picnn/tensor.hpp"

namespace picnn {

struct GridSample {
  Tensor input;      // [1,C,H,W]
  Tensor reference;  // [1,1,H,W]
  BoundarySpec bc;

  std::size_t height() const { return reference.dim(2); }
  std::size_t width() const { return reference.dim(3); }
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

struct AnnulusSpec {
  double r_inner = 0.5, r_outer = 1.0;
  double center_x = 0.0, center_y = 0.0;
  std::size_t n_rho = 32, n_theta = 64;
  double t_out = 0.0;
  std::vector<double> t_in_train{1.0, 7.0};
  std::vector<double> t_in_val{1.0, 7.0};
  std::vector<double> t_in_test{2.0, 3.0, 4.0, 5.0, 6.0};
};

/// Everything needed to regenerate a dataset bit for bit.
struct DatasetSpec {
  PdeKind problem = PdeKind::poisson;
  std::uint64_t seed = 0;
  SplitCounts counts;
  GrfSpec grf;
  AnnulusSpec annulus;
  double boundary_value = 10.0;  // poisson Dirichlet ring
  double u_left = 1.0, u_right = 0.0;  // darcy
  double solver_tol = 1e-10;

  /// Desk-scale defaults for a problem.
  static DatasetSpec defaults(PdeKind problem);
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Stable hash of the canonical JSON form of a spec.
std::uint64_t spec_hash(const DatasetSpec& spec);

enum class SplitName { train, val, test };
inline constexpr std::array<SplitName, 3> kAllSplits{SplitName::train, SplitName::val, SplitName::test};
std::string_view to_string(SplitName s);

struct Dataset {
  DatasetSpec spec;
  std::vector<GridSample> train, val, test;

  std::vector<GridSample>& split(SplitName s);
  const std::vector<GridSample>& split(SplitName s) const;
};

// boundary specs of the three problems
BoundarySpec annulus_boundary(const AnnulusSpec& spec, double t_in);
BoundarySpec poisson_boundary(std::size_t h, std::size_t w, double value);
BoundarySpec darcy_boundary(std::size_t h, std::size_t w, double u_left, double u_right);

/// Analytic annulus temperature T_out + (T_in - T_out) ln(R/rho) / ln(R/r).
double annulus_temperature(const AnnulusSpec& spec, double t_in, double rho);

/// One sample per inner temperature: input is the radial linear interpolation
/// from T_in to T_out, reference is T_in ln(R/rho) / ln(R/r).
std::vector<GridSample> gen_heat_annulus(const AnnulusSpec& spec, const std::vector<double>& t_in);

Dataset gen_heat_dataset(const AnnulusSpec& spec);
Dataset gen_poisson_dataset(const GrfSpec& grf, SplitCounts counts, std::uint64_t seed,
                            double boundary_value = 10.0, double solver_tol = 1e-10);
Dataset gen_darcy_dataset(const GrfSpec& grf, SplitCounts counts, std::uint64_t seed,
                          double u_left = 1.0, double u_right = 0.0, double solver_tol = 1e-10);
Dataset generate_dataset(const DatasetSpec& spec);

/// Writes the split files and manifest; returns the manifest. Throws IoError.
nlohmann::json split_and_serialize(const Dataset& dataset, const std::filesystem::path& dir);
/// Loads a directory written by split_and_serialize; verifies file hashes.
Dataset load_dataset(const std::filesystem::path& dir);
nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace picnn
