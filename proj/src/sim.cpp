#include "pqlglmm/sim.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "pqlglmm/linalg.hpp"
#include "pqlglmm/rng.hpp"
#include "pqlglmm/stats.hpp"

namespace pqlglmm {

namespace {

constexpr std::uint64_t kStreamSharedB = 0xb0;
constexpr std::uint64_t kStreamRepB = 0xb1;
constexpr std::uint64_t kStreamData = 0xda;
constexpr std::uint64_t kStreamMix = 0x313;

// Runs fn(0..count-1), optionally across worker threads. Results must be
// written into per-index slots so scheduling cannot change the outcome.
void run_indexed(int count, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  const int n_threads = std::min(jobs, count);
  threads.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

double sample_response(RngStream& rng, FamilyKind family, double eta_mean) {
  switch (family) {
    case FamilyKind::poisson:
      return static_cast<double>(rng.poisson(std::exp(eta_mean)));
    case FamilyKind::bernoulli: {
      const double p = 1.0 / (1.0 + std::exp(-eta_mean));
      return rng.bernoulli(p) ? 1.0 : 0.0;
    }
    case FamilyKind::gaussian:
      return eta_mean + rng.normal();
    default:
      throw std::invalid_argument("simulation supports poisson/bernoulli/gaussian");
  }
}

Family family_for(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::poisson: return Family::poisson();
    case FamilyKind::bernoulli: return Family::bernoulli();
    case FamilyKind::gaussian: return Family::gaussian();
    default:
      throw std::invalid_argument("simulation supports poisson/bernoulli/gaussian");
  }
}

VectorXd draw_mvn(RngStream& rng, const MatrixXd& factor) {
  VectorXd z(factor.cols());
  for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng.normal();
  return factor * z;
}

}  // namespace

VectorXd partnered5_beta(FamilyKind family) {
  VectorXd beta(5);
  if (family == FamilyKind::poisson) {
    beta << 2.0, 0.1, -0.1, 0.1, 0.1;
  } else {
    beta << -0.1, 0.1, -0.1, 0.1, 0.1;
  }
  return beta;
}

VectorXd SimDesign::default_beta() const {
  if (beta_true.size() > 0) return beta_true;
  if (model == SimModel::poisson_intercept) return VectorXd();
  return partnered5_beta(family);
}

MatrixXd SimDesign::default_G() const {
  if (G_true.size() > 0) return G_true;
  if (model == SimModel::poisson_intercept) {
    MatrixXd g(1, 1);
    g(0, 0) = sigma_b2;
    return g;
  }
  return MatrixXd::Identity(5, 5);
}

void SimDesign::validate() const {
  if (m < 1 || n < 1) throw std::invalid_argument("sim design: m, n must be >= 1");
  if (replicates < 1) {
    throw std::invalid_argument("sim design: replicates must be >= 1");
  }
  if (model == SimModel::partnered5) {
    if (beta_true.size() > 0 && beta_true.size() != 5) {
      throw std::invalid_argument("sim design: partnered5 uses 5 covariates");
    }
    if (G_true.size() > 0 && (G_true.rows() != 5 || G_true.cols() != 5)) {
      throw std::invalid_argument("sim design: partnered5 G_true must be 5x5");
    }
  } else {
    if (!(sigma_b2 >= 0.0)) {
      throw std::invalid_argument("sim design: sigma_b2 must be >= 0");
    }
    if (family != FamilyKind::poisson) {
      throw std::invalid_argument("sim design: intercept model is Poisson");
    }
  }
}

std::pair<ClusteredDesign, ThetaState> generate_partnered5(
    const SimDesign& design, std::uint64_t replicate_index) {
  design.validate();
  const VectorXd beta = design.default_beta();
  const MatrixXd G = design.default_G();
  const MatrixXd G_factor = psd_factor(G, "sim G_true");

  RngStream b_rng = design.regime == SimRegime::conditional
                        ? RngStream(design.seed, {kStreamSharedB})
                        : RngStream(design.seed, {kStreamRepB, replicate_index});
  RngStream data_rng(design.seed, {kStreamData, replicate_index});

  ThetaState truth;
  truth.beta = beta;
  truth.b.reserve(design.m);
  std::vector<ClusterData> clusters(design.m);
  for (int i = 0; i < design.m; ++i) truth.b.push_back(draw_mvn(b_rng, G_factor));

  const double rho = 0.5;
  const double rho_c = std::sqrt(1.0 - rho * rho);
  for (int i = 0; i < design.m; ++i) {
    ClusterData c;
    c.X.resize(design.n, 5);
    c.y.resize(design.n);
    for (int j = 0; j < design.n; ++j) {
      const double z1 = data_rng.normal();
      const double z2 = data_rng.normal();
      c.X(j, 0) = 1.0;
      c.X(j, 1) = z1;
      c.X(j, 2) = rho * z1 + rho_c * z2;
      c.X(j, 3) = data_rng.normal();
      c.X(j, 4) = data_rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    c.Z = c.X;
    const VectorXd eta = c.X * (beta + truth.b[i]);
    for (int j = 0; j < design.n; ++j) {
      c.y[j] = sample_response(data_rng, design.family, eta[j]);
    }
    clusters[i] = std::move(c);
  }
  return {ClusteredDesign::from_clusters(std::move(clusters)), std::move(truth)};
}

std::pair<ClusteredDesign, ThetaState> generate_poisson_intercept(
    int m, int n, double sigma_b2, std::uint64_t seed,
    std::uint64_t replicate_index) {
  if (m < 1 || n < 1) throw std::invalid_argument("intercept model: m, n >= 1");
  if (!(sigma_b2 >= 0.0)) {
    throw std::invalid_argument("intercept model: sigma_b2 must be >= 0");
  }
  RngStream b_rng(seed, {kStreamRepB, replicate_index});
  RngStream data_rng(seed, {kStreamData, replicate_index, 0x9});
  const double sigma = std::sqrt(sigma_b2);

  ThetaState truth;
  truth.beta = VectorXd();
  truth.b.reserve(m);
  std::vector<ClusterData> clusters(m);
  for (int i = 0; i < m; ++i) {
    VectorXd b(1);
    b[0] = sigma * b_rng.normal();
    truth.b.push_back(b);
    ClusterData c;
    c.X.resize(n, 0);
    c.Z = MatrixXd::Ones(n, 1);
    c.y.resize(n);
    const double mean = std::exp(b[0]);
    for (int j = 0; j < n; ++j) {
      c.y[j] = static_cast<double>(data_rng.poisson(mean));
    }
    clusters[i] = std::move(c);
  }
  return {ClusteredDesign::from_clusters(std::move(clusters)), std::move(truth)};
}

namespace {

struct ExpandedTarget {
  std::string name;   // e.g. "beta[2]"
  std::string group;  // e.g. "beta"
  int component = 0;
};

std::vector<ExpandedTarget> expand_targets(const SimDesign& design,
                                           const std::vector<std::string>& groups) {
  const int p_f = design.model == SimModel::partnered5 ? 5 : 0;
  const int p_r = design.model == SimModel::partnered5 ? 5 : 1;
  std::vector<ExpandedTarget> out;
  for (const auto& g : groups) {
    int count;
    if (g == "beta") {
      if (p_f == 0) {
        throw std::invalid_argument("target beta: model has no fixed effects");
      }
      count = p_f;
    } else if (g == "b1" || g == "gap1") {
      count = p_r;
    } else if (g == "linpred1") {
      if (p_f == 0) {
        throw std::invalid_argument("target linpred1: model has no fixed effects");
      }
      count = 1;
    } else {
      throw std::invalid_argument("unknown target group: " + g);
    }
    for (int k = 0; k < count; ++k) {
      out.push_back({g + "[" + std::to_string(k) + "]", g, k});
    }
  }
  return out;
}

struct RepResult {
  bool ok = false;
  std::vector<char> covered;
  std::vector<double> error;      // estimate - truth
  std::vector<double> sw_sample;  // value whose sampling distribution is examined
  double frob_sample = 0.0;
  double frob_working = 0.0;
  double sum_b_inf = 0.0;
};

std::pair<ClusteredDesign, ThetaState> generate_any(const SimDesign& design,
                                                    std::uint64_t rep) {
  if (design.model == SimModel::partnered5) return generate_partnered5(design, rep);
  return generate_poisson_intercept(design.m, design.n, design.sigma_b2,
                                    design.seed, rep);
}

MatrixXd init_G_for(const SimDesign& design) {
  return design.model == SimModel::partnered5
             ? MatrixXd::Identity(5, 5)
             : MatrixXd::Identity(1, 1);
}

void aggregate(const std::vector<RepResult>& results,
               const std::vector<ExpandedTarget>& targets,
               ExperimentReport& report) {
  const std::size_t T = targets.size();
  std::vector<double> covered(T, 0.0), err_sum(T, 0.0);
  std::vector<std::vector<double>> samples(T);
  int used = 0;
  double frob_s = 0.0, frob_w = 0.0;
  for (const auto& r : results) {
    if (!r.ok) {
      ++report.replicates_dropped;
      continue;
    }
    ++used;
    frob_s += r.frob_sample;
    frob_w += r.frob_working;
    report.max_sum_b_inf = std::max(report.max_sum_b_inf, r.sum_b_inf);
    for (std::size_t t = 0; t < T; ++t) {
      covered[t] += r.covered[t] ? 1.0 : 0.0;
      err_sum[t] += r.error[t];
      samples[t].push_back(r.sw_sample[t]);
    }
  }
  report.replicates_used = used;
  if (used == 0) return;
  report.frobenius_mean = frob_s / used;
  report.frobenius_working_mean = frob_w / used;
  for (std::size_t t = 0; t < T; ++t) {
    report.coverage[targets[t].name] = covered[t] / used;
    report.bias[targets[t].name] = err_sum[t] / used;
    if (samples[t].size() >= 3) {
      auto& group_p = report.shapiro_p[targets[t].group];
      try {
        group_p.push_back(shapiro_wilk(samples[t]).p_value);
      } catch (const std::invalid_argument&) {
        group_p.push_back(std::nan(""));
      }
      const auto mom = sample_moments(samples[t]);
      report.variance[targets[t].name] = mom.variance;
      report.excess_kurtosis[targets[t].name] = mom.excess_kurtosis;
    }
  }
}

}  // namespace

ExperimentReport run_coverage_experiment(const SimDesign& design,
                                         const SolverConfig& solver_config,
                                         const ExperimentOptions& options) {
  design.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto targets = expand_targets(design, options.targets);
  const MatrixXd G_true = design.default_G();
  const MatrixXd init_G = init_G_for(design);
  const Family family = design.model == SimModel::poisson_intercept
                            ? Family::poisson()
                            : family_for(design.family);

  std::vector<RepResult> results(design.replicates);
  run_indexed(design.replicates, options.jobs, [&](int rep) {
    auto [data, truth] = generate_any(design, static_cast<std::uint64_t>(rep));
    RepResult r;
    PqlFit fit = fit_pql(data, family, solver_config, init_G, 1.0);
    if (!fit.converged) {
      results[rep] = std::move(r);
      return;
    }
    r.ok = true;
    r.frob_sample = (fit.G_sample - G_true).norm();
    r.frob_working = (fit.G_hat - G_true).norm();
    r.sum_b_inf = fit.sum_b_inf;
    r.covered.resize(targets.size());
    r.error.resize(targets.size());
    r.sw_sample.resize(targets.size());

    VectorXd mean_b = VectorXd::Zero(data.p_r);
    for (const auto& bi : truth.b) mean_b += bi;
    mean_b /= static_cast<double>(truth.b.size());

    InferenceOptions iopts;
    iopts.dispersion = 1.0;
    iopts.n_draws = options.n_draws;
    if (options.use_true_values) {
      iopts.eval_at = truth;
      iopts.mixing_G = G_true;
    }
    const MatrixXd G_inf = options.use_true_values ? G_true : fit.G_sample;
    const bool conditional = design.regime == SimRegime::conditional;
    const std::uint64_t mix_seed = RngStream::derive_key(
        design.seed, {kStreamMix, static_cast<std::uint64_t>(rep)});

    std::vector<IntervalResult> gap_cache;
    bool gap_cached = false;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto& tg = targets[t];
      const int k = tg.component;
      IntervalResult iv;
      double truth_value;
      if (tg.group == "beta") {
        truth_value = truth.beta[k] + (conditional ? mean_b[k] : 0.0);
        iv = conditional
                 ? conditional_interval(
                       data, fit, TargetSelection::fixed_effect(k, data.p_f),
                       options.level, iopts)
                 : unconditional_fixed_interval(fit, k, options.level, G_inf);
      } else if (tg.group == "b1" || tg.group == "gap1") {
        if (conditional) {
          truth_value = truth.b[0][k] - mean_b[k];
          iv = conditional_interval(
              data, fit, TargetSelection::random_effect(0, k, data.p_r),
              options.level, iopts);
        } else {
          truth_value = truth.b[0][k];
          if (!gap_cached) {
            gap_cache =
                prediction_gap_interval(data, fit, 0, options.level,
                                        options.gap_regime, G_inf, mix_seed, iopts);
            gap_cached = true;
          }
          iv = gap_cache[static_cast<std::size_t>(k)];
        }
      } else {  // linpred1
        const VectorXd a = data.clusters[0].X.row(0).transpose();
        truth_value = a.dot(truth.beta + truth.b[0]);
        iv = conditional
                 ? conditional_interval(data, fit,
                                        TargetSelection::linear_combo(0, a),
                                        options.level, iopts)
                 : linear_predictor_interval(data, fit, 0, a, options.level,
                                             mix_seed + 1, iopts);
      }
      r.covered[t] = iv.covers(truth_value) ? 1 : 0;
      r.error[t] = iv.estimate - truth_value;
      r.sw_sample[t] = conditional ? iv.estimate : r.error[t];
    }
    results[rep] = std::move(r);
  });

  ExperimentReport report;
  report.design = design;
  aggregate(results, targets, report);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

ExperimentReport run_gap_normality_study(const SimDesign& design,
                                         const SolverConfig& solver_config,
                                         const ExperimentOptions& options) {
  design.validate();
  if (design.regime != SimRegime::unconditional) {
    throw std::invalid_argument("gap normality study is unconditional");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int p_r = design.model == SimModel::partnered5 ? 5 : 1;
  std::vector<ExpandedTarget> targets;
  for (int k = 0; k < p_r; ++k) {
    targets.push_back({"gap1[" + std::to_string(k) + "]", "gap1", k});
  }
  const MatrixXd G_true = design.default_G();
  const MatrixXd init_G = init_G_for(design);
  const Family family = design.model == SimModel::poisson_intercept
                            ? Family::poisson()
                            : family_for(design.family);
  const double root_n = std::sqrt(static_cast<double>(design.n));
  const double z = norm_quantile(0.5 + 0.5 * options.level);

  struct GapRep {
    bool ok = false;
    std::vector<double> scaled_gap;
    std::vector<char> covered_mixn;
    std::vector<char> covered_naive;
    double sum_b_inf = 0.0;
  };
  std::vector<GapRep> results(design.replicates);

  run_indexed(design.replicates, options.jobs, [&](int rep) {
    auto [data, truth] = generate_any(design, static_cast<std::uint64_t>(rep));
    GapRep r;
    PqlFit fit = fit_pql(data, family, solver_config, init_G, 1.0);
    if (!fit.converged) {
      results[rep] = std::move(r);
      return;
    }
    r.ok = true;
    r.sum_b_inf = fit.sum_b_inf;
    r.scaled_gap.resize(p_r);
    r.covered_mixn.resize(p_r);
    r.covered_naive.resize(p_r);

    InferenceOptions iopts;
    iopts.n_draws = options.n_draws;
    if (options.use_true_values) {
      iopts.eval_at = truth;
      iopts.mixing_G = G_true;
    }
    const MatrixXd G_inf = options.use_true_values ? G_true : fit.G_sample;
    const std::uint64_t mix_seed = RngStream::derive_key(
        design.seed, {kStreamMix, static_cast<std::uint64_t>(rep)});

    const auto intervals = prediction_gap_interval(
        data, fit, 0, options.level, options.gap_regime, G_inf, mix_seed, iopts);

    // Same mixture draws, used for the naive same-variance normal interval.
    MixNSpec spec;
    spec.mixing_cov = G_inf;
    spec.n_draws = options.n_draws;
    const VectorXd beta_eval = iopts.eval_at ? iopts.eval_at->beta : fit.theta.beta;
    const auto& c0 = data.clusters[0];
    const double n_i = static_cast<double>(c0.y.size());
    spec.cond_cov = [&c0, beta_eval, n_i, family](const VectorXd& b) {
      VectorXd eta = c0.Z * b;
      if (beta_eval.size() > 0) eta += c0.X * beta_eval;
      VectorXd w(eta.size());
      for (Eigen::Index j = 0; j < eta.size(); ++j) {
        w[j] = cumulant_derivs(family, eta[j]).var;
      }
      const MatrixXd info = c0.Z.transpose() * (w.asDiagonal() * c0.Z) / n_i;
      return MatrixXd(info.inverse());
    };
    const MatrixXd draws = mixn_sample(spec, mix_seed);

    for (int k = 0; k < p_r; ++k) {
      r.scaled_gap[k] = root_n * (fit.theta.b[0][k] - truth.b[0][k]);
      r.covered_mixn[k] = intervals[k].covers(truth.b[0][k]) ? 1 : 0;
      std::vector<double> col(draws.rows());
      for (Eigen::Index t = 0; t < draws.rows(); ++t) col[t] = draws(t, k);
      const double sd = std::sqrt(sample_moments(col).variance);
      const double hw = z * sd / root_n;
      const double est = fit.theta.b[0][k];
      r.covered_naive[k] =
          (est - hw <= truth.b[0][k] && truth.b[0][k] <= est + hw) ? 1 : 0;
    }
    results[rep] = std::move(r);
  });

  ExperimentReport report;
  report.design = design;
  int used = 0;
  std::vector<std::vector<double>> samples(p_r);
  std::vector<double> cov_mixn(p_r, 0.0), cov_naive(p_r, 0.0);
  for (const auto& r : results) {
    if (!r.ok) {
      ++report.replicates_dropped;
      continue;
    }
    ++used;
    report.max_sum_b_inf = std::max(report.max_sum_b_inf, r.sum_b_inf);
    for (int k = 0; k < p_r; ++k) {
      samples[k].push_back(r.scaled_gap[k]);
      cov_mixn[k] += r.covered_mixn[k];
      cov_naive[k] += r.covered_naive[k];
    }
  }
  report.replicates_used = used;
  if (used > 0) {
    for (int k = 0; k < p_r; ++k) {
      const auto& name = targets[static_cast<std::size_t>(k)].name;
      report.coverage[name + ":mixn"] = cov_mixn[k] / used;
      report.coverage[name + ":naive"] = cov_naive[k] / used;
      if (samples[k].size() >= 3) {
        report.shapiro_p["gap1"].push_back(shapiro_wilk(samples[k]).p_value);
        const auto mom = sample_moments(samples[k]);
        report.variance[name] = mom.variance;
        report.excess_kurtosis[name] = mom.excess_kurtosis;
        report.bias[name] = mom.mean;
      }
    }
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<FrobeniusCell> frobenius_table(
    const std::vector<SimDesign>& designs, const SolverConfig& solver_config,
    const std::vector<std::string>& g_modes, int jobs) {
  std::vector<FrobeniusCell> cells;
  for (const auto& design : designs) {
    design.validate();
    for (const auto& mode : g_modes) {
      SolverConfig config = solver_config;
      MatrixXd init_G = init_G_for(design);
      if (mode == "sample_cov") {
        config.g_update_mode = GUpdateMode::sample_cov;
      } else if (mode.rfind("fixed:", 0) == 0) {
        config.g_update_mode = GUpdateMode::fixed;
        const double scale = std::stod(mode.substr(6));
        if (!(scale > 0.0)) {
          throw std::invalid_argument("frobenius table: fixed scale must be > 0");
        }
        init_G *= scale;
      } else {
        throw std::invalid_argument("frobenius table: unknown mode " + mode);
      }

      const MatrixXd G_true = design.default_G();
      const Family family = design.model == SimModel::poisson_intercept
                                ? Family::poisson()
                                : family_for(design.family);

      struct Slot {
        bool ok = false;
        double frob_sample = 0.0;
        double frob_working = 0.0;
        double sum_b_inf = 0.0;
      };
      std::vector<Slot> slots(design.replicates);
      run_indexed(design.replicates, jobs, [&](int rep) {
        auto [data, truth] = generate_any(design, static_cast<std::uint64_t>(rep));
        (void)truth;
        PqlFit fit = fit_pql(data, family, config, init_G, 1.0);
        if (!fit.converged) return;
        slots[rep] = {true, (fit.G_sample - G_true).norm(),
                      (fit.G_hat - G_true).norm(), fit.sum_b_inf};
      });

      FrobeniusCell cell;
      cell.design = design;
      cell.g_mode = mode;
      for (const auto& s : slots) {
        if (!s.ok) {
          ++cell.replicates_dropped;
          continue;
        }
        ++cell.replicates_used;
        cell.frobenius_sample_mean += s.frob_sample;
        cell.frobenius_working_mean += s.frob_working;
        cell.max_sum_b_inf = std::max(cell.max_sum_b_inf, s.sum_b_inf);
      }
      if (cell.replicates_used > 0) {
        cell.frobenius_sample_mean /= cell.replicates_used;
        cell.frobenius_working_mean /= cell.replicates_used;
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

namespace {

nlohmann::json design_json(const SimDesign& d) {
  return nlohmann::json{
      {"model", d.model == SimModel::partnered5 ? "partnered5" : "poisson_intercept"},
      {"family", family_for(d.family).tag()},
      {"regime",
       d.regime == SimRegime::conditional ? "conditional" : "unconditional"},
      {"m", d.m},
      {"n", d.n},
      {"replicates", d.replicates},
      {"seed", d.seed}};
}

}  // namespace

std::string ExperimentReport::to_json() const {
  nlohmann::json j;
  j["design"] = design_json(design);
  j["replicates_used"] = replicates_used;
  j["replicates_dropped"] = replicates_dropped;
  j["coverage"] = coverage;
  j["bias"] = bias;
  j["shapiro_p"] = shapiro_p;
  j["variance"] = variance;
  j["excess_kurtosis"] = excess_kurtosis;
  j["frobenius_mean"] = frobenius_mean;
  j["frobenius_working_mean"] = frobenius_working_mean;
  return j.dump(2);
}

std::string ExperimentReport::to_csv(bool with_header) const {
  std::ostringstream out;
  out.precision(17);
  if (with_header) {
    out << "model,family,regime,m,n,replicates,used,dropped,target,coverage,"
           "bias,variance,excess_kurtosis,shapiro_p,frobenius_mean\n";
  }
  const std::string prefix =
      (design.model == SimModel::partnered5 ? std::string("partnered5")
                                          : std::string("poisson_intercept")) +
      "," + family_for(design.family).tag() + "," +
      (design.regime == SimRegime::conditional ? "conditional" : "unconditional") +
      "," + std::to_string(design.m) + "," + std::to_string(design.n) + "," +
      std::to_string(design.replicates) + "," + std::to_string(replicates_used) +
      "," + std::to_string(replicates_dropped);
  for (const auto& [target, rate] : coverage) {
    out << prefix << "," << target << "," << rate;
    auto bias_it = bias.find(target);
    out << "," << (bias_it != bias.end() ? bias_it->second : std::nan(""));
    auto var_it = variance.find(target);
    out << "," << (var_it != variance.end() ? var_it->second : std::nan(""));
    auto kurt_it = excess_kurtosis.find(target);
    out << "," << (kurt_it != excess_kurtosis.end() ? kurt_it->second : std::nan(""));
    // per-component Shapiro-Wilk p, keyed by the target's group
    const auto bracket = target.find('[');
    double p = std::nan("");
    if (bracket != std::string::npos) {
      const auto close = target.find(']', bracket);
      const auto group_it = shapiro_p.find(target.substr(0, bracket));
      if (group_it != shapiro_p.end() && close != std::string::npos) {
        const std::size_t comp = static_cast<std::size_t>(
            std::stoi(target.substr(bracket + 1, close - bracket - 1)));
        if (comp < group_it->second.size()) p = group_it->second[comp];
      }
    }
    out << "," << p << "," << frobenius_mean << "\n";
  }
  return out.str();
}

std::string frobenius_table_csv(const std::vector<FrobeniusCell>& cells) {
  std::ostringstream out;
  out.precision(17);
  out << "model,family,m,n,replicates,used,dropped,g_mode,frobenius_sample,"
         "frobenius_working\n";
  for (const auto& c : cells) {
    out << (c.design.model == SimModel::partnered5 ? "partnered5"
                                                 : "poisson_intercept")
        << "," << family_for(c.design.family).tag() << ","
        << c.design.m << "," << c.design.n << "," << c.design.replicates << ","
        << c.replicates_used << "," << c.replicates_dropped << "," << c.g_mode
        << "," << c.frobenius_sample_mean << "," << c.frobenius_working_mean
        << "\n";
  }
  return out.str();
}

}  // namespace pqlglmm
