#include "pqlglmm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pqlglmm/linalg.hpp"
#include "pqlglmm/rng.hpp"
#include "pqlglmm/stats.hpp"

namespace pqlglmm {

Regime Regime::from_tag(const std::string& tag) {
  if (tag == "conditional") return conditional();
  if (tag == "auto" || tag == "unconditional") return auto_select();
  if (tag == "many_clusters" || tag == "a") return many_clusters();
  // gamma resolved from m/n_i at interval time when left at zero
  if (tag == "balanced" || tag == "b") return balanced(0.0);
  if (tag == "large_clusters" || tag == "c") return large_clusters();
  throw std::invalid_argument("unknown regime tag: " + tag);
}

std::string Regime::label() const {
  switch (tag) {
    case RegimeTag::conditional: return "conditional";
    case RegimeTag::uncond_many_clusters: return "uncond_many_clusters";
    case RegimeTag::uncond_balanced:
      return "uncond_balanced(gamma=" + std::to_string(gamma) + ")";
    case RegimeTag::uncond_large_clusters: return "uncond_large_clusters";
    case RegimeTag::auto_select: return "auto";
  }
  return "?";
}

std::string basis_label(IntervalBasis basis) {
  switch (basis) {
    case IntervalBasis::normal: return "normal";
    case IntervalBasis::mixn: return "mixN";
    case IntervalBasis::convolution: return "convolution";
  }
  return "?";
}

TargetSelection TargetSelection::fixed_effect(Eigen::Index k, Eigen::Index p) {
  TargetSelection t;
  t.kind = Kind::fixed_effect;
  t.coeffs = VectorXd::Zero(p);
  t.coeffs[k] = 1.0;
  return t;
}

TargetSelection TargetSelection::random_effect(Eigen::Index cluster,
                                               Eigen::Index k, Eigen::Index p) {
  TargetSelection t;
  t.kind = Kind::random_effect;
  t.cluster_index = cluster;
  t.coeffs = VectorXd::Zero(p);
  t.coeffs[k] = 1.0;
  return t;
}

TargetSelection TargetSelection::linear_combo(Eigen::Index cluster,
                                              VectorXd coeffs) {
  TargetSelection t;
  t.kind = Kind::linear_combo;
  t.cluster_index = cluster;
  t.coeffs = std::move(coeffs);
  return t;
}

Regime resolve_auto_regime(Eigen::Index m, Eigen::Index n_i) {
  const double ratio = static_cast<double>(m) / static_cast<double>(n_i);
  if (ratio >= 3.0) return Regime::many_clusters();
  if (ratio <= 1.0 / 3.0) return Regime::large_clusters();
  return Regime::balanced(ratio);
}

namespace {

void check_level(double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw std::invalid_argument("interval level must be in (0,1)");
  }
}

void check_cluster(const ClusteredDesign& design, Eigen::Index i) {
  if (i < 0 || i >= design.m()) {
    throw std::invalid_argument("cluster index " + std::to_string(i) +
                                " out of range");
  }
}

// W_i X_i information at the supplied parameter state.
MatrixXd cluster_information(const ClusterData& cluster, const VectorXd& beta,
                             const VectorXd& b, const Family& family,
                             double dispersion, bool use_Z) {
  const MatrixXd& D = use_Z ? cluster.Z : cluster.X;
  VectorXd eta = cluster.Z * b;
  if (beta.size() > 0) eta += cluster.X * beta;
  VectorXd w(eta.size());
  for (Eigen::Index j = 0; j < eta.size(); ++j) {
    w[j] = cumulant_derivs(family, eta[j]).var / dispersion;
  }
  return D.transpose() * (w.asDiagonal() * D);
}

MatrixXd invert_information(const MatrixXd& info, Eigen::Index cluster) {
  Eigen::LLT<MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("inference: information matrix of cluster " +
                             std::to_string(cluster) +
                             " is singular (collinear cluster design)");
  }
  return llt.solve(MatrixXd::Identity(info.rows(), info.cols()));
}

IntervalResult normal_interval(double estimate, double variance, double level,
                               const std::string& regime) {
  IntervalResult out;
  out.estimate = estimate;
  out.level = level;
  out.basis = IntervalBasis::normal;
  out.regime = regime;
  const double z = norm_quantile(0.5 + 0.5 * level);
  const double se = std::sqrt(std::max(variance, 0.0));
  out.lower = estimate - z * se;
  out.upper = estimate + z * se;
  return out;
}

}  // namespace

MatrixXd plug_in_K(const ClusteredDesign& design, const PqlFit& fit,
                   Eigen::Index cluster_index, double dispersion,
                   const std::optional<ThetaState>& eval_at) {
  check_cluster(design, cluster_index);
  if (!(dispersion > 0.0)) {
    throw std::invalid_argument("plug_in_K: dispersion must be positive");
  }
  const ThetaState& at = eval_at ? *eval_at : fit.theta;
  const auto& c = design.clusters[cluster_index];
  const double n_i = static_cast<double>(c.y.size());
  const MatrixXd info = cluster_information(c, at.beta, at.b[cluster_index],
                                            fit.family, dispersion,
                                            /*use_Z=*/false) /
                        n_i;
  return invert_information(info, cluster_index);
}

IntervalResult conditional_interval(const ClusteredDesign& design,
                                    const PqlFit& fit,
                                    const TargetSelection& target, double level,
                                    const InferenceOptions& opts) {
  check_level(level);
  if (!design.partnered) {
    throw std::invalid_argument(
        "conditional intervals require a partnered design (X_i = Z_i)");
  }
  if (target.coeffs.size() != design.p_f) {
    throw std::invalid_argument("target coefficient vector has wrong length");
  }

  const double N = static_cast<double>(design.total_obs());
  const double n_bar = design.mean_cluster_size();
  IntervalResult out;

  if (target.kind == TargetSelection::Kind::fixed_effect) {
    MatrixXd K_bar = MatrixXd::Zero(design.p_f, design.p_f);
    for (Eigen::Index i = 0; i < design.m(); ++i) {
      const double n_i = static_cast<double>(design.clusters[i].y.size());
      K_bar += (n_bar / n_i) *
               plug_in_K(design, fit, i, opts.dispersion, opts.eval_at);
    }
    K_bar /= static_cast<double>(design.m());
    const double variance = target.coeffs.dot(K_bar * target.coeffs) / N;
    out = normal_interval(target.coeffs.dot(fit.theta.beta), variance, level,
                          "conditional");
    return out;
  }

  if (!target.cluster_index) {
    throw std::invalid_argument("target requires a cluster index");
  }
  const Eigen::Index i = *target.cluster_index;
  check_cluster(design, i);
  const double n_i = static_cast<double>(design.clusters[i].y.size());
  const MatrixXd H_i = plug_in_K(design, fit, i, opts.dispersion, opts.eval_at);
  const double variance = target.coeffs.dot(H_i * target.coeffs) / n_i;

  const double estimate =
      target.kind == TargetSelection::Kind::random_effect
          ? target.coeffs.dot(fit.theta.b[i])
          : target.coeffs.dot(fit.theta.beta + fit.theta.b[i]);
  return normal_interval(estimate, variance, level, "conditional");
}

IntervalResult unconditional_fixed_interval(const PqlFit& fit, Eigen::Index k,
                                            double level,
                                            const MatrixXd& G_for_inference) {
  check_level(level);
  if (k < 0 || k >= fit.theta.beta.size()) {
    throw std::invalid_argument("fixed-effect index out of range");
  }
  if (G_for_inference.rows() <= k || G_for_inference.cols() <= k) {
    throw std::invalid_argument("G_for_inference too small for index");
  }
  const double m = static_cast<double>(fit.m());
  IntervalResult out = normal_interval(
      fit.theta.beta[k], G_for_inference(k, k) / m, level, "unconditional");
  if (fit.m() == 1) {
    out.warning = true;
    out.note = "m = 1: large-sample approximation inapplicable";
  }
  return out;
}

MatrixXd mixn_sample(const MixNSpec& spec, std::uint64_t seed) {
  if (spec.n_draws < 1) {
    throw std::invalid_argument("mixn: n_draws must be >= 1");
  }
  if (!spec.cond_cov) throw std::invalid_argument("mixn: missing cond_cov");
  RngStream rng(seed, {0x6d69784eULL});
  const Eigen::Index mix_dim = spec.mixing_cov.rows();
  const MatrixXd L_mix = psd_factor(spec.mixing_cov, "mixing covariance");

  MatrixXd draws;
  MatrixXd L_extra;
  for (int t = 0; t < spec.n_draws; ++t) {
    VectorXd z(mix_dim);
    for (Eigen::Index j = 0; j < mix_dim; ++j) z[j] = rng.normal();
    const VectorXd b = L_mix * z;
    const MatrixXd cov = spec.cond_cov(b);
    MatrixXd L;
    try {
      L = psd_factor(cov, "conditional covariance");
    } catch (const std::runtime_error& err) {
      throw std::runtime_error(std::string(err.what()) + " at draw " +
                               std::to_string(t));
    }
    const Eigen::Index dim = cov.rows();
    if (t == 0) {
      draws.resize(spec.n_draws, dim);
      if (spec.extra_normal_cov) {
        if (spec.extra_normal_cov->rows() != dim) {
          throw std::invalid_argument(
              "mixn: extra_normal_cov dimension mismatch");
        }
        L_extra = psd_factor(*spec.extra_normal_cov, "convolution covariance");
      }
    }
    VectorXd v(dim);
    for (Eigen::Index j = 0; j < dim; ++j) v[j] = rng.normal();
    VectorXd u = L * v;
    if (spec.extra_normal_cov) {
      VectorXd w(dim);
      for (Eigen::Index j = 0; j < dim; ++j) w[j] = rng.normal();
      u += L_extra * w;
    }
    draws.row(t) = u.transpose();
  }
  return draws;
}

MatrixXd mixn_quantiles(const MixNSpec& spec, const std::vector<double>& probs,
                        std::uint64_t seed) {
  for (double p : probs) {
    if (!(p > 0.0 && p < 1.0)) {
      throw std::invalid_argument("mixn: probabilities must be in (0,1)");
    }
  }
  const MatrixXd draws = mixn_sample(spec, seed);
  MatrixXd out(draws.cols(), static_cast<Eigen::Index>(probs.size()));
  std::vector<double> column(static_cast<std::size_t>(draws.rows()));
  for (Eigen::Index k = 0; k < draws.cols(); ++k) {
    for (Eigen::Index t = 0; t < draws.rows(); ++t) {
      column[static_cast<std::size_t>(t)] = draws(t, k);
    }
    std::sort(column.begin(), column.end());
    for (std::size_t q = 0; q < probs.size(); ++q) {
      out(k, static_cast<Eigen::Index>(q)) = quantile_sorted(column, probs[q]);
    }
  }
  return out;
}

namespace {

// Conditional covariance of the scaled prediction gap given a mixing draw b:
// (n_i^{-1} Z_i^T W(b) Z_i)^{-1} with the linear predictor X_i beta + Z_i b.
// In the partnered case Z_i = X_i; the pure random-intercept case (p_f = 0)
// uses Z_i alone.
MixNSpec gap_mixn_spec(const ClusteredDesign& design, const PqlFit& fit,
                       Eigen::Index cluster_index,
                       const MatrixXd& G_for_inference,
                       const InferenceOptions& opts) {
  if (!design.partnered && design.p_f > 0) {
    throw std::invalid_argument(
        "prediction-gap mixture requires a partnered design or a pure "
        "random-effect model");
  }
  const auto& c = design.clusters[cluster_index];
  const double n_i = static_cast<double>(c.y.size());
  const VectorXd beta = opts.eval_at ? opts.eval_at->beta : fit.theta.beta;
  const Family family = fit.family;
  const double dispersion = opts.dispersion;

  MixNSpec spec;
  spec.mixing_cov = G_for_inference;
  spec.n_draws = opts.n_draws;
  spec.cond_cov = [&c, beta, family, dispersion, n_i,
                   cluster_index](const VectorXd& b) {
    const MatrixXd info =
        cluster_information(c, beta, b, family, dispersion, /*use_Z=*/true) /
        n_i;
    return invert_information(info, cluster_index);
  };
  return spec;
}

}  // namespace

std::vector<IntervalResult> prediction_gap_interval(
    const ClusteredDesign& design, const PqlFit& fit, Eigen::Index cluster_index,
    double level, const Regime& regime, const MatrixXd& G_for_inference,
    std::uint64_t seed, const InferenceOptions& opts) {
  check_level(level);
  check_cluster(design, cluster_index);
  const auto& c = design.clusters[cluster_index];
  const double n_i = static_cast<double>(c.y.size());
  const double m = static_cast<double>(design.m());

  Regime resolved = regime;
  if (resolved.tag == RegimeTag::auto_select) {
    resolved = resolve_auto_regime(design.m(), c.y.size());
  }
  if (resolved.tag == RegimeTag::uncond_balanced && !(resolved.gamma > 0.0)) {
    resolved.gamma = m / n_i;
  }
  if (resolved.tag == RegimeTag::conditional) {
    throw std::invalid_argument(
        "prediction-gap intervals are an unconditional construction");
  }

  std::vector<IntervalResult> out;
  const VectorXd& b_hat = fit.theta.b[cluster_index];

  if (resolved.tag == RegimeTag::uncond_large_clusters) {
    for (Eigen::Index k = 0; k < design.p_r; ++k) {
      IntervalResult iv = normal_interval(
          b_hat[k], G_for_inference(k, k) / m, level, resolved.label());
      out.push_back(std::move(iv));
    }
    return out;
  }

  MixNSpec spec = gap_mixn_spec(design, fit, cluster_index, G_for_inference, opts);
  IntervalBasis basis = IntervalBasis::mixn;
  if (resolved.tag == RegimeTag::uncond_balanced) {
    if (!(resolved.gamma > 0.0)) {
      throw std::invalid_argument("balanced regime requires gamma > 0");
    }
    spec.extra_normal_cov = G_for_inference / resolved.gamma;
    basis = IntervalBasis::convolution;
  }

  const double alpha = 1.0 - level;
  const MatrixXd qs =
      mixn_quantiles(spec, {0.5 * alpha, 1.0 - 0.5 * alpha}, seed);
  const double root_n = std::sqrt(n_i);
  for (Eigen::Index k = 0; k < design.p_r; ++k) {
    IntervalResult iv;
    iv.estimate = b_hat[k];
    iv.level = level;
    iv.basis = basis;
    iv.regime = resolved.label();
    // pivot inversion of n^{1/2}(b_hat - b) between the two quantiles
    iv.lower = b_hat[k] - qs(k, 1) / root_n;
    iv.upper = b_hat[k] - qs(k, 0) / root_n;
    out.push_back(std::move(iv));
  }
  return out;
}

IntervalResult linear_predictor_interval(const ClusteredDesign& design,
                                         const PqlFit& fit,
                                         Eigen::Index cluster_index,
                                         const VectorXd& a, double level,
                                         std::uint64_t seed,
                                         const InferenceOptions& opts) {
  check_level(level);
  check_cluster(design, cluster_index);
  if (!design.partnered) {
    throw std::invalid_argument(
        "linear predictor intervals require a partnered design");
  }
  if (a.size() != design.p_f) {
    throw std::invalid_argument("contrast vector has wrong length");
  }
  const auto& c = design.clusters[cluster_index];
  const double n_i = static_cast<double>(c.y.size());
  const VectorXd beta = opts.eval_at ? opts.eval_at->beta : fit.theta.beta;
  const Family family = fit.family;
  const double dispersion = opts.dispersion;

  MixNSpec spec;
  spec.mixing_cov = opts.mixing_G ? *opts.mixing_G : fit.G_sample;
  spec.n_draws = opts.n_draws;
  spec.cond_cov = [&c, beta, family, dispersion, n_i, cluster_index,
                   a](const VectorXd& b) {
    const MatrixXd info =
        cluster_information(c, beta, b, family, dispersion, /*use_Z=*/false) /
        n_i;
    const MatrixXd K = invert_information(info, cluster_index);
    MatrixXd s(1, 1);
    s(0, 0) = a.dot(K * a);
    return s;
  };

  const double alpha = 1.0 - level;
  const MatrixXd qs =
      mixn_quantiles(spec, {0.5 * alpha, 1.0 - 0.5 * alpha}, seed);
  const double root_n = std::sqrt(n_i);

  IntervalResult iv;
  iv.estimate = a.dot(fit.theta.beta + fit.theta.b[cluster_index]);
  iv.level = level;
  iv.basis = IntervalBasis::mixn;
  iv.regime = "uncond_many_clusters";
  iv.lower = iv.estimate - qs(0, 1) / root_n;
  iv.upper = iv.estimate - qs(0, 0) / root_n;
  return iv;
}

PredictorCheck predictor_distribution_check(
    const PqlFit& fit, const std::vector<Eigen::Index>& subset) {
  if (subset.empty()) {
    throw std::invalid_argument("predictor check: empty cluster subset");
  }
  const Eigen::Index p = fit.theta.b.front().size();
  PredictorCheck out;
  out.mean = VectorXd::Zero(p);
  out.second_moment = MatrixXd::Zero(p, p);
  for (Eigen::Index i : subset) {
    if (i < 0 || i >= fit.m()) {
      throw std::invalid_argument("predictor check: cluster index out of range");
    }
    out.mean += fit.theta.b[i];
    out.second_moment += fit.theta.b[i] * fit.theta.b[i].transpose();
  }
  const double count = static_cast<double>(subset.size());
  out.mean /= count;
  out.second_moment /= count;
  out.shapiro_p = VectorXd::Constant(p, std::nan(""));
  if (subset.size() >= 3) {
    std::vector<double> comp(subset.size());
    for (Eigen::Index k = 0; k < p; ++k) {
      for (std::size_t s = 0; s < subset.size(); ++s) {
        comp[s] = fit.theta.b[subset[s]][k];
      }
      out.shapiro_p[k] = shapiro_wilk(comp).p_value;
    }
  }
  return out;
}

}  // namespace pqlglmm
