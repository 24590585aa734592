#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"
#include "pqlglmm/sim.hpp"
#include "pqlglmm/solver.hpp"

namespace pqlglmm {

// File and format problems; the CLI maps this to exit code 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ColumnMapping {
  std::string cluster = "cluster_id";
  std::string response = "y";
  std::vector<std::string> fixed;   // fixed-effect columns, in order
  std::vector<std::string> random;  // random-effect columns, in order
};

struct Dataset {
  ClusteredDesign design;
  std::vector<std::string> cluster_ids;  // first-appearance order
  std::uint64_t data_hash = 0;           // FNV-1a over the raw file bytes
};

// Parses a CSV with a header row. Throws IoError with row/column context on
// malformed input (missing cells, duplicate columns, non-numeric values).
Dataset load_dataset_csv(const std::string& path, const ColumnMapping& columns);

struct RunConfig {
  std::string family_tag = "poisson";
  int trials = 1;
  ColumnMapping columns;
  SolverConfig solver;
  double level = 0.95;
  std::string regime = "auto";
  int n_draws = 10000;
  std::optional<std::uint64_t> seed;
  double init_G_scale = 1.0;  // initial working covariance: scale * I
  double init_phi = 1.0;

  Family family() const { return Family::from_tag(family_tag, trials); }
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
};

struct SimConfig {
  SimModel model = SimModel::partnered5;
  FamilyKind family = FamilyKind::poisson;
  SimRegime regime = SimRegime::unconditional;
  std::vector<int> grid_m = {25, 100};
  std::vector<int> grid_n = {25, 100};
  bool full_grid = false;  // expands both axes to {25,50,100,200,400}
  int replicates = 200;
  std::vector<std::string> targets = {"beta", "b1"};
  double level = 0.95;
  std::uint64_t seed = 1;
  double sigma_b2 = 1.0;
  bool use_true_values = true;
  int n_draws = 10000;
  std::string study = "coverage";  // coverage | gap_normality | frobenius
  std::vector<std::string> g_modes = {"sample_cov"};
  SolverConfig solver;

  std::vector<SimDesign> expand() const;
  static SimConfig from_json(const nlohmann::json& j);
  static SimConfig load(const std::string& path);
};

SolverConfig solver_config_from_json(const nlohmann::json& j);
nlohmann::json solver_config_to_json(const SolverConfig& config);

// Fit artifact: everything cmd_infer needs to rebuild intervals.
nlohmann::json make_fit_artifact(const Dataset& dataset, const RunConfig& config,
                                 const PqlFit& fit, double phi_tilde);

struct LoadedArtifact {
  PqlFit fit;
  double phi_tilde = 1.0;
  std::string family_tag;
  int trials = 1;
  std::uint64_t data_hash = 0;
  std::vector<std::string> cluster_ids;
};

LoadedArtifact load_fit_artifact(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace pqlglmm
