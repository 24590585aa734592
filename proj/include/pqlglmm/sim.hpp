#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"
#include "pqlglmm/inference.hpp"
#include "pqlglmm/solver.hpp"

namespace pqlglmm {

enum class SimModel { partnered5, poisson_intercept };
enum class SimRegime { conditional, unconditional };

// One cell of the simulation grid. The partnered5 model has five partnered
// covariates: an intercept, a correlated bivariate-normal pair (rho = 0.5), a
// standard normal draw and a Bernoulli(0.5) indicator; the poisson_intercept
// model is the pure random-intercept counterexample.
struct SimDesign {
  SimModel model = SimModel::partnered5;
  FamilyKind family = FamilyKind::poisson;
  int m = 25;
  int n = 25;
  VectorXd beta_true;     // defaults per family when empty
  MatrixXd G_true;        // defaults to I_5 when empty
  double sigma_b2 = 1.0;  // poisson_intercept only
  SimRegime regime = SimRegime::unconditional;
  int replicates = 200;
  std::uint64_t seed = 1;

  VectorXd default_beta() const;
  MatrixXd default_G() const;
  void validate() const;
};

// Default true coefficients used throughout the reference experiments.
VectorXd partnered5_beta(FamilyKind family);

// Generates one replicate. Under the conditional regime the random effects
// are derived from the design seed alone, so every replicate shares the same
// realisation; covariates and responses always depend on the replicate index.
std::pair<ClusteredDesign, ThetaState> generate_partnered5(
    const SimDesign& design, std::uint64_t replicate_index);

std::pair<ClusteredDesign, ThetaState> generate_poisson_intercept(
    int m, int n, double sigma_b2, std::uint64_t seed,
    std::uint64_t replicate_index);

struct ExperimentReport {
  SimDesign design;
  std::map<std::string, double> coverage;
  std::map<std::string, double> bias;
  std::map<std::string, std::vector<double>> shapiro_p;
  std::map<std::string, double> variance;
  std::map<std::string, double> excess_kurtosis;
  double frobenius_mean = 0.0;          // mean ||G_sample - G_true||_F
  double frobenius_working_mean = 0.0;  // mean ||G_hat - G_true||_F
  double max_sum_b_inf = 0.0;  // worst ||sum_i b_i||_inf across replicate fits
  int replicates_used = 0;
  int replicates_dropped = 0;
  double wall_seconds = 0.0;  // excluded from serialized reports

  std::string to_json() const;
  // CSV rows, one per target; includes a header when requested.
  std::string to_csv(bool with_header) const;
};

struct ExperimentOptions {
  double level = 0.95;
  // Target groups: "beta", "b1" (conditional regime) or "gap1"
  // (unconditional), "linpred1". Each expands to one entry per component.
  std::vector<std::string> targets = {"beta", "b1"};
  bool use_true_values = true;  // evaluate interval variances at the truth
  int jobs = 1;
  int n_draws = 10000;
  Regime gap_regime = Regime::auto_select();
};

ExperimentReport run_coverage_experiment(const SimDesign& design,
                                         const SolverConfig& solver_config,
                                         const ExperimentOptions& options);

// Collects sqrt(n) (b_hat_1 - b_1) across replicates; reports Shapiro-Wilk
// p-values, empirical variance and excess kurtosis per component, plus
// coverage of mixN-based and naive-normal intervals for the first cluster.
ExperimentReport run_gap_normality_study(const SimDesign& design,
                                         const SolverConfig& solver_config,
                                         const ExperimentOptions& options);

struct FrobeniusCell {
  SimDesign design;
  std::string g_mode;  // "sample_cov" or "fixed:<scale>"
  double frobenius_sample_mean = 0.0;
  double frobenius_working_mean = 0.0;
  double max_sum_b_inf = 0.0;
  int replicates_used = 0;
  int replicates_dropped = 0;
};

std::vector<FrobeniusCell> frobenius_table(
    const std::vector<SimDesign>& designs, const SolverConfig& solver_config,
    const std::vector<std::string>& g_modes, int jobs = 1);

std::string frobenius_table_csv(const std::vector<FrobeniusCell>& cells);

}  // namespace pqlglmm
