#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"
#include "pqlglmm/pql.hpp"

namespace pqlglmm {

enum class GUpdateMode { sample_cov, fixed };

struct SolverConfig {
  int max_newton_iters = 100;
  double grad_tol = 1e-8;        // sup-norm of the stacked gradient
  int max_outer_iters = 100;
  double g_update_tol = 1e-6;    // Frobenius norm of the G_hat change
  GUpdateMode g_update_mode = GUpdateMode::sample_cov;
  int step_halving_max = 40;
  double ridge_floor = 1e-8;
  double g_eigen_floor = 1e-8;   // applied after each sample-covariance update

  void validate() const;
};

struct PqlFit {
  ThetaState theta;
  Family family;
  MatrixXd G_hat;       // working covariance used in the final inner fit
  MatrixXd G_sample;    // m^{-1} sum_i b_i b_i^T at the final estimates
  double phi_hat = 1.0; // working dispersion
  bool converged = false;
  int newton_iters_total = 0;
  int outer_iters = 0;
  double final_grad_norm = 0.0;
  double sum_b_inf = 0.0;  // sup-norm of sum_i b_i (0 for partnered fits)
  std::vector<double> objective_trace;
  std::vector<std::string> warnings;

  Eigen::Index m() const { return static_cast<Eigen::Index>(theta.b.size()); }
};

// Per-cluster capacitance matrices and the fixed-effect Schur complement
// C = B1 - sum_i B2_i (B3_i + G^{-1})^{-1} B2_i^T (symmetrized).
struct SchurParts {
  MatrixXd C;                  // p_f x p_f
  std::vector<MatrixXd> caps;  // m blocks, (B3_i + G^{-1})^{-1}
};

SchurParts schur_complement(const HessianBlocks& blocks);

struct NewtonStep {
  VectorXd delta;  // stacked (beta, b_1, ..., b_m)
  bool direction_ok = true;
};

// Solves B delta = grad Q blockwise through the Schur complement; the dense
// (m+1)p system is never formed.
NewtonStep newton_step(const ClusteredDesign& design, const ThetaState& theta,
                       const WorkingParams& work, const Family& family,
                       const SolverConfig& config);

// Damped Newton maximization of the PQL objective at fixed working (G, phi).
PqlFit fit_inner(const ClusteredDesign& design, const WorkingParams& work,
                 const Family& family, const SolverConfig& config,
                 const std::optional<ThetaState>& init = std::nullopt);

// Full PQL procedure: alternates fit_inner with the sample-covariance update
// G_hat <- m^{-1} sum_i b_i b_i^T until the Frobenius change is below
// g_update_tol (or keeps G_hat fixed at init_G under GUpdateMode::fixed).
PqlFit fit_pql(const ClusteredDesign& design, const Family& family,
               const SolverConfig& config, const MatrixXd& init_G,
               double init_phi);

// Pearson dispersion estimate (N - p_f)^{-1} sum (y - mu)^2 / a''(eta).
// Families with known dispersion return that value. The denominator scaling
// is a convention; pass dof_correction = false to divide by N instead.
double estimate_dispersion(const ClusteredDesign& design, const PqlFit& fit,
                           const Family& family, bool dof_correction = true);

// Fixed-effects-only GLM estimate used to initialize beta.
VectorXd glm_beta_init(const ClusteredDesign& design, const Family& family,
                       int max_iters = 25);

}  // namespace pqlglmm
