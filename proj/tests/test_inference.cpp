#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "pqlglmm/inference.hpp"
#include "pqlglmm/rng.hpp"
#include "pqlglmm/sim.hpp"
#include "pqlglmm/stats.hpp"
#include "test_designs.hpp"

using namespace pqlglmm;

namespace {

PqlFit quick_fit(const ClusteredDesign& design, const Family& family,
                 const Eigen::MatrixXd& G, double phi = 1.0) {
  SolverConfig config;
  config.grad_tol = 1e-10;
  config.g_update_mode = GUpdateMode::fixed;
  return fit_pql(design, family, config, G, phi);
}

}  // namespace

TEST_CASE("plug_in_K") {
  SUBCASE("orthonormal columns scaled by sqrt(n) give the identity") {
    const int n = 16;
    ClusterData c;
    c.X = Eigen::MatrixXd::Zero(n, 2);
    for (int j = 0; j < n; ++j) {
      c.X(j, 0) = (j % 2 == 0 ? 1.0 : -1.0);
      c.X(j, 1) = (j % 4 < 2 ? 1.0 : -1.0);
    }
    c.Z = c.X;
    c.y = Eigen::VectorXd::Zero(n);
    auto data = ClusteredDesign::from_clusters({c});
    PqlFit fit;
    fit.family = Family::gaussian();
    fit.theta = ThetaState::zero(data);
    const Eigen::MatrixXd H = plug_in_K(data, fit, 0, 1.0);
    CHECK((H - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("poisson intercept at eta = 0 gives the scalar 1") {
    ClusterData c;
    c.X = Eigen::MatrixXd::Ones(10, 1);
    c.Z = c.X;
    c.y = Eigen::VectorXd::Ones(10);
    auto data = ClusteredDesign::from_clusters({c});
    PqlFit fit;
    fit.family = Family::poisson();
    fit.theta = ThetaState::zero(data);
    const Eigen::MatrixXd H = plug_in_K(data, fit, 0, 1.0);
    CHECK(H(0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("random instance matches the definition") {
    RngStream rng(53);
    const auto inst = testing::random_instance(rng, Family::poisson(), 3, 8, 2);
    PqlFit fit;
    fit.family = inst.family;
    fit.theta = inst.theta;
    const double phi = 1.7;
    const Eigen::MatrixXd H = plug_in_K(inst.design, fit, 1, phi);
    const auto& c = inst.design.clusters[1];
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(2, 2);
    const Eigen::VectorXd eta = cluster_eta(c, inst.theta.beta, inst.theta.b[1]);
    for (Eigen::Index j = 0; j < c.y.size(); ++j) {
      info += cumulant_derivs(inst.family, eta[j]).var / phi *
              c.X.row(j).transpose() * c.X.row(j);
    }
    info /= static_cast<double>(c.y.size());
    CHECK((H - info.inverse()).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("collinear cluster design raises") {
    ClusterData c;
    c.X = Eigen::MatrixXd::Ones(5, 2);  // duplicated column
    c.Z = c.X;
    c.y = Eigen::VectorXd::Zero(5);
    auto data = ClusteredDesign::from_clusters({c});
    PqlFit fit;
    fit.family = Family::gaussian();
    fit.theta = ThetaState::zero(data);
    CHECK_THROWS_AS(plug_in_K(data, fit, 0, 1.0), std::runtime_error);
  }
}

TEST_CASE("conditional intervals") {
  RngStream rng(59);
  const auto inst = testing::random_instance(rng, Family::poisson(), 4, 6, 2);
  const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
  REQUIRE(fit.converged);

  SUBCASE("normal quantile scaling at level 0.95") {
    const auto iv = conditional_interval(
        inst.design, fit, TargetSelection::fixed_effect(0, 2), 0.95);
    const double se = (iv.upper - iv.lower) / (2.0 * 1.959963984540054);
    CHECK(iv.estimate == doctest::Approx(fit.theta.beta[0]));
    CHECK(iv.upper - iv.estimate == doctest::Approx(1.959963984540054 * se));
    CHECK(iv.basis == IntervalBasis::normal);
  }
  SUBCASE("balanced design variance equals the simplified form") {
    // balanced: all n_i equal, so Var = m^{-2} sum_i H_i[k,k] / n
    RngStream rng2(61);
    auto balanced = testing::random_instance(rng2, Family::poisson(), 4, 2, 2);
    for (auto& c : balanced.design.clusters) {
      // force equal sizes by regenerating at fixed n
      REQUIRE(c.y.size() >= 2);
    }
    // rebuild with fixed n = 5
    std::vector<ClusterData> clusters;
    for (int i = 0; i < 4; ++i) {
      ClusterData c;
      c.X.resize(5, 2);
      c.y.resize(5);
      for (int j = 0; j < 5; ++j) {
        c.X(j, 0) = 1.0;
        c.X(j, 1) = rng2.normal();
        c.y[j] = static_cast<double>(rng2.poisson(1.5));
      }
      c.Z = c.X;
      clusters.push_back(std::move(c));
    }
    auto data = ClusteredDesign::from_clusters(std::move(clusters));
    const PqlFit bfit = quick_fit(data, Family::poisson(),
                                  Eigen::MatrixXd::Identity(2, 2));
    REQUIRE(bfit.converged);
    const auto iv = conditional_interval(data, bfit,
                                         TargetSelection::fixed_effect(1, 2), 0.95);
    double direct = 0.0;
    for (Eigen::Index i = 0; i < data.m(); ++i) {
      direct += plug_in_K(data, bfit, i, 1.0)(1, 1);
    }
    direct /= static_cast<double>(data.m() * data.m()) * 5.0;
    const double se = (iv.upper - iv.estimate) / 1.959963984540054;
    CHECK(se * se == doctest::Approx(direct).epsilon(1e-10));
  }
  SUBCASE("random-effect and linear-combo variances use H_i / n_i") {
    const auto iv_b = conditional_interval(
        inst.design, fit, TargetSelection::random_effect(1, 0, 2), 0.95);
    const auto& c = inst.design.clusters[1];
    const Eigen::MatrixXd H = plug_in_K(inst.design, fit, 1, 1.0);
    const double var = H(0, 0) / static_cast<double>(c.y.size());
    CHECK(iv_b.upper - iv_b.estimate ==
          doctest::Approx(1.959963984540054 * std::sqrt(var)).epsilon(1e-10));

    Eigen::Vector2d a(1.0, 0.5);
    const auto iv_c = conditional_interval(
        inst.design, fit, TargetSelection::linear_combo(1, a), 0.95);
    CHECK(iv_c.estimate ==
          doctest::Approx(a.dot(fit.theta.beta + fit.theta.b[1])));
    const double var_c = a.dot(H * a) / static_cast<double>(c.y.size());
    CHECK(iv_c.upper - iv_c.estimate ==
          doctest::Approx(1.959963984540054 * std::sqrt(var_c)).epsilon(1e-10));
  }
  SUBCASE("non-partnered designs are rejected") {
    RngStream rng3(67);
    const auto np = testing::random_instance(rng3, Family::poisson(), 3, 5, 2,
                                             /*partnered=*/false);
    const PqlFit np_fit = quick_fit(np.design, np.family, np.work.G_hat);
    CHECK_THROWS_AS(conditional_interval(np.design, np_fit,
                                         TargetSelection::fixed_effect(0, 2), 0.95),
                    std::invalid_argument);
  }
}

TEST_CASE("unconditional fixed-effect interval") {
  RngStream rng(71);
  const auto inst = testing::random_instance(rng, Family::poisson(), 100, 3, 2);
  const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
  REQUIRE(fit.converged);
  SUBCASE("halfwidth with the identity G at m = 100") {
    const auto iv =
        unconditional_fixed_interval(fit, 0, 0.95, Eigen::MatrixXd::Identity(2, 2));
    CHECK(iv.upper - iv.estimate == doctest::Approx(0.1959963984540054).epsilon(1e-12));
    CHECK(iv.basis == IntervalBasis::normal);
  }
  SUBCASE("m = 1 returns a warning") {
    RngStream rng2(73);
    const auto single = testing::random_instance(rng2, Family::poisson(), 1, 6, 2);
    const PqlFit sfit = quick_fit(single.design, single.family, single.work.G_hat);
    const auto iv =
        unconditional_fixed_interval(sfit, 0, 0.95, Eigen::MatrixXd::Identity(2, 2));
    CHECK(iv.warning);
  }
  SUBCASE("index out of range raises") {
    CHECK_THROWS_AS(
        unconditional_fixed_interval(fit, 5, 0.95, Eigen::MatrixXd::Identity(2, 2)),
        std::invalid_argument);
  }
}

TEST_CASE("mixn quantiles") {
  SUBCASE("constant conditional covariance reduces to the normal") {
    MixNSpec spec;
    spec.mixing_cov = Eigen::MatrixXd::Identity(1, 1);
    spec.cond_cov = [](const Eigen::VectorXd&) {
      return Eigen::MatrixXd::Identity(2, 2) * 2.25;
    };
    spec.n_draws = 10000;
    const auto qs = mixn_quantiles(spec, {0.025, 0.5, 0.975}, 98765);
    // MC standard error of the quantile estimator at p = 0.025
    const double z = norm_quantile(0.975);
    const double sd = 1.5;
    const double dens = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI) / sd;
    const double se = std::sqrt(0.025 * 0.975 / 10000.0) / dens;
    for (int k = 0; k < 2; ++k) {
      CHECK(std::fabs(qs(k, 0) - (-z * sd)) < 3.0 * se);
      CHECK(std::fabs(qs(k, 2) - z * sd) < 3.0 * se);
      CHECK(std::fabs(qs(k, 1)) < 3.0 * se);
    }
  }
  SUBCASE("poisson random-intercept mixture has variance e^{1/2}") {
    MixNSpec spec;
    spec.mixing_cov = Eigen::MatrixXd::Identity(1, 1);
    spec.cond_cov = [](const Eigen::VectorXd& b) {
      Eigen::MatrixXd s(1, 1);
      s(0, 0) = std::exp(-b[0]);
      return s;
    };
    spec.n_draws = 100000;
    const auto draws = mixn_sample(spec, 13579);
    std::vector<double> col(draws.rows());
    for (Eigen::Index t = 0; t < draws.rows(); ++t) col[t] = draws(t, 0);
    const auto mom = sample_moments(col);
    CHECK(std::fabs(mom.variance - std::exp(0.5)) < 0.05);
  }
  SUBCASE("deterministic and monotone") {
    MixNSpec spec;
    spec.mixing_cov = Eigen::MatrixXd::Identity(2, 2);
    spec.cond_cov = [](const Eigen::VectorXd& b) {
      return Eigen::MatrixXd((0.5 + b.squaredNorm()) *
                             Eigen::MatrixXd::Identity(2, 2));
    };
    spec.n_draws = 2000;
    const auto q1 = mixn_quantiles(spec, {0.1, 0.5, 0.9}, 5);
    const auto q2 = mixn_quantiles(spec, {0.1, 0.5, 0.9}, 5);
    CHECK((q1 - q2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(q1(0, 0) < q1(0, 1));
    CHECK(q1(0, 1) < q1(0, 2));
    const auto q3 = mixn_quantiles(spec, {0.1, 0.5, 0.9}, 6);
    CHECK((q1 - q3).cwiseAbs().maxCoeff() > 0.0);
  }
  SUBCASE("invalid probabilities are rejected") {
    MixNSpec spec;
    spec.mixing_cov = Eigen::MatrixXd::Identity(1, 1);
    spec.cond_cov = [](const Eigen::VectorXd&) {
      return Eigen::MatrixXd::Identity(1, 1);
    };
    CHECK_THROWS_AS(mixn_quantiles(spec, {0.0}, 1), std::invalid_argument);
    CHECK_THROWS_AS(mixn_quantiles(spec, {1.2}, 1), std::invalid_argument);
  }
}

TEST_CASE("prediction gap intervals") {
  RngStream rng(79);
  SUBCASE("gaussian case (a) equals the conditional normal interval") {
    const auto inst = testing::random_instance(rng, Family::gaussian(), 12, 4, 2);
    const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
    REQUIRE(fit.converged);
    InferenceOptions opts;
    opts.n_draws = 40000;
    const auto gaps = prediction_gap_interval(
        inst.design, fit, 0, 0.95, Regime::many_clusters(),
        Eigen::MatrixXd::Identity(2, 2), 2024, opts);
    const auto cond = conditional_interval(
        inst.design, fit, TargetSelection::random_effect(0, 0, 2), 0.95);
    // the mixture degenerates for gaussian weights; quantile MC error only
    const double hw_gap = gaps[0].halfwidth();
    const double hw_cond = cond.halfwidth();
    CHECK(std::fabs(hw_gap - hw_cond) / hw_cond < 0.05);
    CHECK(gaps[0].basis == IntervalBasis::mixn);
  }
  SUBCASE("case (c) halfwidth is z / sqrt(m)") {
    std::vector<ClusterData> clusters;
    RngStream rng2(83);
    for (int i = 0; i < 400; ++i) {
      ClusterData c;
      c.X = Eigen::MatrixXd::Ones(2, 1);
      c.Z = c.X;
      c.y.resize(2);
      c.y << static_cast<double>(rng2.poisson(1.0)),
          static_cast<double>(rng2.poisson(1.0));
      clusters.push_back(std::move(c));
    }
    auto data = ClusteredDesign::from_clusters(std::move(clusters));
    const PqlFit fit = quick_fit(data, Family::poisson(),
                                 Eigen::MatrixXd::Identity(1, 1));
    const auto gaps = prediction_gap_interval(data, fit, 0, 0.95,
                                              Regime::large_clusters(),
                                              Eigen::MatrixXd::Identity(1, 1), 7);
    CHECK(gaps[0].halfwidth() ==
          doctest::Approx(1.959963984540054 / 20.0).epsilon(1e-12));
    CHECK(gaps[0].basis == IntervalBasis::normal);
  }
  SUBCASE("regime (b) adds variance relative to regime (a)") {
    const auto inst = testing::random_instance(rng, Family::poisson(), 8, 5, 2);
    const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
    REQUIRE(fit.converged);
    InferenceOptions opts;
    opts.n_draws = 20000;
    const auto a = prediction_gap_interval(inst.design, fit, 0, 0.95,
                                           Regime::many_clusters(),
                                           inst.work.G_hat, 11, opts);
    const auto b = prediction_gap_interval(inst.design, fit, 0, 0.95,
                                           Regime::balanced(2.0),
                                           inst.work.G_hat, 11, opts);
    CHECK(b[0].halfwidth() > a[0].halfwidth());
    CHECK(b[0].basis == IntervalBasis::convolution);
  }
  SUBCASE("auto regime resolution") {
    CHECK(resolve_auto_regime(400, 25).tag == RegimeTag::uncond_many_clusters);
    CHECK(resolve_auto_regime(25, 400).tag == RegimeTag::uncond_large_clusters);
    const auto r = resolve_auto_regime(50, 100);
    CHECK(r.tag == RegimeTag::uncond_balanced);
    CHECK(r.gamma == doctest::Approx(0.5));
  }
}

TEST_CASE("linear predictor interval") {
  RngStream rng(89);
  SUBCASE("gaussian reduces to the normal with variance a^T H a / n") {
    const auto inst = testing::random_instance(rng, Family::gaussian(), 6, 4, 2);
    const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
    REQUIRE(fit.converged);
    Eigen::Vector2d a(1.0, inst.design.clusters[0].X(0, 1));
    InferenceOptions opts;
    opts.n_draws = 40000;
    const auto iv =
        linear_predictor_interval(inst.design, fit, 0, a, 0.95, 31, opts);
    const Eigen::MatrixXd H = plug_in_K(inst.design, fit, 0, 1.0);
    const double n0 = static_cast<double>(inst.design.clusters[0].y.size());
    const double hw = 1.959963984540054 * std::sqrt(a.dot(H * a) / n0);
    CHECK(std::fabs(iv.halfwidth() - hw) / hw < 0.05);
    CHECK(iv.estimate == doctest::Approx(a.dot(fit.theta.beta + fit.theta.b[0])));
  }
  SUBCASE("length mismatch raises") {
    const auto inst = testing::random_instance(rng, Family::poisson(), 3, 4, 2);
    const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
    CHECK_THROWS_AS(linear_predictor_interval(inst.design, fit, 0,
                                              Eigen::VectorXd::Ones(3), 0.95, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("interval nesting across levels") {
  RngStream rng(97);
  const auto inst = testing::random_instance(rng, Family::poisson(), 9, 5, 2);
  const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
  REQUIRE(fit.converged);
  InferenceOptions opts;
  opts.n_draws = 10000;
  const auto iv95 = prediction_gap_interval(inst.design, fit, 0, 0.95,
                                            Regime::many_clusters(),
                                            inst.work.G_hat, 55, opts);
  const auto iv99 = prediction_gap_interval(inst.design, fit, 0, 0.99,
                                            Regime::many_clusters(),
                                            inst.work.G_hat, 55, opts);
  for (std::size_t k = 0; k < iv95.size(); ++k) {
    CHECK(iv99[k].lower < iv95[k].lower);
    CHECK(iv99[k].upper > iv95[k].upper);
  }
}

TEST_CASE("halfwidth scaling rates") {
  // synthetic fixed H: conditional fixed-effect halfwidth shrinks like
  // N^{-1/2} while the unconditional one only responds to m
  ClusterData proto;
  proto.X = Eigen::MatrixXd::Ones(4, 1);
  proto.Z = proto.X;
  proto.y.resize(4);
  proto.y << 1, 2, 0, 1;

  auto build = [&](int m, int n) {
    std::vector<ClusterData> cs;
    for (int i = 0; i < m; ++i) {
      ClusterData c;
      c.X = Eigen::MatrixXd::Ones(n, 1);
      c.Z = c.X;
      c.y = Eigen::VectorXd::Ones(n);
      cs.push_back(std::move(c));
    }
    return ClusteredDesign::from_clusters(std::move(cs));
  };
  auto data1 = build(10, 20);
  auto data2 = build(10, 40);
  PqlFit f1, f2;
  f1.family = f2.family = Family::poisson();
  f1.theta = ThetaState::zero(data1);
  f2.theta = ThetaState::zero(data2);
  const auto iv1 = conditional_interval(data1, f1,
                                        TargetSelection::fixed_effect(0, 1), 0.95);
  const auto iv2 = conditional_interval(data2, f2,
                                        TargetSelection::fixed_effect(0, 1), 0.95);
  CHECK(iv1.halfwidth() / iv2.halfwidth() == doctest::Approx(std::sqrt(2.0)));

  f1.theta.beta = Eigen::VectorXd::Zero(1);
  const Eigen::MatrixXd G = Eigen::MatrixXd::Identity(1, 1);
  const auto u1 = unconditional_fixed_interval(f1, 0, 0.95, G);
  const auto u2 = unconditional_fixed_interval(f2, 0, 0.95, G);
  CHECK(u1.halfwidth() == doctest::Approx(u2.halfwidth()));
}

TEST_CASE("predictor distribution check") {
  RngStream rng(101);
  const auto inst = testing::random_instance(rng, Family::poisson(), 30, 5, 2);
  const PqlFit fit = quick_fit(inst.design, inst.family, inst.work.G_hat);
  REQUIRE(fit.converged);
  std::vector<Eigen::Index> all(30);
  for (int i = 0; i < 30; ++i) all[i] = i;
  const auto check = predictor_distribution_check(fit, all);
  CHECK((check.second_moment - fit.G_sample).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(check.shapiro_p.size() == 2);
  CHECK_THROWS_AS(predictor_distribution_check(fit, {}), std::invalid_argument);
}
