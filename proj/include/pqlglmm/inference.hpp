#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"
#include "pqlglmm/solver.hpp"

namespace pqlglmm {

enum class RegimeTag {
  conditional,
  uncond_many_clusters,  // m / n_i -> infinity
  uncond_balanced,       // m / n_i -> gamma in (0, inf)
  uncond_large_clusters, // m / n_i -> 0
  auto_select,
};

struct Regime {
  RegimeTag tag = RegimeTag::auto_select;
  double gamma = 0.0;  // set when tag == uncond_balanced

  static Regime conditional() { return {RegimeTag::conditional, 0.0}; }
  static Regime auto_select() { return {RegimeTag::auto_select, 0.0}; }
  static Regime many_clusters() { return {RegimeTag::uncond_many_clusters, 0.0}; }
  static Regime balanced(double gamma) { return {RegimeTag::uncond_balanced, gamma}; }
  static Regime large_clusters() { return {RegimeTag::uncond_large_clusters, 0.0}; }
  static Regime from_tag(const std::string& tag);
  std::string label() const;
};

enum class IntervalBasis { normal, mixn, convolution };

std::string basis_label(IntervalBasis basis);

struct IntervalResult {
  std::string target;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  IntervalBasis basis = IntervalBasis::normal;
  std::string regime;
  bool warning = false;
  std::string note;

  bool covers(double value) const { return lower <= value && value <= upper; }
  double halfwidth() const { return 0.5 * (upper - lower); }
};

struct TargetSelection {
  enum class Kind { fixed_effect, random_effect, linear_combo };
  Kind kind = Kind::fixed_effect;
  std::optional<Eigen::Index> cluster_index;
  VectorXd coeffs;  // selection/contrast vector of length p

  static TargetSelection fixed_effect(Eigen::Index k, Eigen::Index p);
  static TargetSelection random_effect(Eigen::Index cluster, Eigen::Index k,
                                       Eigen::Index p);
  static TargetSelection linear_combo(Eigen::Index cluster, VectorXd coeffs);
};

// Knobs shared by the interval constructions. `eval_at` switches the plug-in
// weight matrices from the fitted values to a supplied parameter state; the
// simulation harness passes the truth there to build coverage intervals the
// way the reference experiments do.
struct InferenceOptions {
  double dispersion = 1.0;
  std::optional<ThetaState> eval_at;
  // Mixing law covariance for mixN constructions; defaults to the fit's
  // sample covariance of the estimated random effects.
  std::optional<MatrixXd> mixing_G;
  int n_draws = 10000;
};

// Slutsky plug-in H_i = (n_i^{-1} X_i^T W_i X_i)^{-1} with
// W_i = dispersion^{-1} diag a''(eta_i).
MatrixXd plug_in_K(const ClusteredDesign& design, const PqlFit& fit,
                   Eigen::Index cluster_index, double dispersion,
                   const std::optional<ThetaState>& eval_at = std::nullopt);

// Normal coverage/confidence interval under the conditional regime
// (random effects treated as constants). Requires a partnered design.
IntervalResult conditional_interval(const ClusteredDesign& design,
                                    const PqlFit& fit,
                                    const TargetSelection& target, double level,
                                    const InferenceOptions& opts = {});

// Unconditional m^{1/2}-rate interval: beta_k +/- z * sqrt(G_kk / m) with a
// consistent estimate of the random-effects covariance.
IntervalResult unconditional_fixed_interval(const PqlFit& fit, Eigen::Index k,
                                            double level,
                                            const MatrixXd& G_for_inference);

// Normal scale-mixture: draws b ~ N(0, mixing_cov), then v ~ N(0, cond_cov(b)),
// optionally adds an independent N(0, extra_normal_cov) convolution term.
struct MixNSpec {
  std::function<MatrixXd(const VectorXd&)> cond_cov;
  MatrixXd mixing_cov;
  std::optional<MatrixXd> extra_normal_cov;
  int n_draws = 10000;
};

// Empirical quantiles of every component of the mixture; row k holds the
// quantiles of component k at the requested probabilities. Deterministic
// given the seed.
MatrixXd mixn_quantiles(const MixNSpec& spec, const std::vector<double>& probs,
                        std::uint64_t seed);

// Monte Carlo sample of the mixture (n_draws x dim), used where moments of
// the mixture itself are needed.
MatrixXd mixn_sample(const MixNSpec& spec, std::uint64_t seed);

// Unconditional prediction-gap intervals for the true random effect of one
// cluster, one IntervalResult per component. The distributional basis depends
// on the cluster-size regime: a normal scale mixture when m/n_i is large, its
// convolution with an extra normal in the balanced case, and a plain normal
// when clusters dominate.
std::vector<IntervalResult> prediction_gap_interval(
    const ClusteredDesign& design, const PqlFit& fit, Eigen::Index cluster_index,
    double level, const Regime& regime, const MatrixXd& G_for_inference,
    std::uint64_t seed, const InferenceOptions& opts = {});

// Normal scale-mixture interval for a^T (beta + b_i). Applicability assumes
// the cluster count grows at least like the square root of the largest
// cluster; this is not checked at run time.
IntervalResult linear_predictor_interval(const ClusteredDesign& design,
                                         const PqlFit& fit,
                                         Eigen::Index cluster_index,
                                         const VectorXd& a, double level,
                                         std::uint64_t seed,
                                         const InferenceOptions& opts = {});

// Diagnostic backed by the consistency of the estimated random effects:
// empirical moments and per-component Shapiro-Wilk p-values over a subset of
// clusters (the estimates should look like draws from N(0, G)).
struct PredictorCheck {
  VectorXd mean;
  MatrixXd second_moment;  // |S|^{-1} sum b_i b_i^T
  VectorXd shapiro_p;      // per component; NaN when |S| < 3
};

PredictorCheck predictor_distribution_check(const PqlFit& fit,
                                            const std::vector<Eigen::Index>& subset);

// Finite-sample rule used by Regime::auto_select: m/n_i >= 3 picks the
// many-clusters case, m/n_i <= 1/3 the large-clusters case, anything between
// the balanced case with gamma = m/n_i.
Regime resolve_auto_regime(Eigen::Index m, Eigen::Index n_i);

}  // namespace pqlglmm
