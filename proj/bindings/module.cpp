#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>

#include "pqlglmm/family.hpp"
#include "pqlglmm/inference.hpp"
#include "pqlglmm/sim.hpp"
#include "pqlglmm/solver.hpp"
#include "pqlglmm/stats.hpp"

namespace py = pybind11;
using namespace pqlglmm;

namespace {

ClusteredDesign design_from_arrays(const Eigen::VectorXd& y,
                                   const Eigen::MatrixXd& X,
                                   const Eigen::MatrixXd& Z,
                                   const std::vector<long>& cluster_ids) {
  const Eigen::Index N = y.size();
  if (X.rows() != N || Z.rows() != N ||
      static_cast<Eigen::Index>(cluster_ids.size()) != N) {
    throw std::invalid_argument("y, X, Z and cluster_ids must share row counts");
  }
  std::vector<long> order;
  std::map<long, std::vector<Eigen::Index>> rows;
  for (Eigen::Index i = 0; i < N; ++i) {
    auto it = rows.find(cluster_ids[i]);
    if (it == rows.end()) {
      order.push_back(cluster_ids[i]);
      it = rows.emplace(cluster_ids[i], std::vector<Eigen::Index>{}).first;
    }
    it->second.push_back(i);
  }
  std::vector<ClusterData> clusters;
  for (long id : order) {
    const auto& idx = rows.at(id);
    ClusterData c;
    c.y.resize(idx.size());
    c.X.resize(idx.size(), X.cols());
    c.Z.resize(idx.size(), Z.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      c.y[j] = y[idx[j]];
      c.X.row(j) = X.row(idx[j]);
      c.Z.row(j) = Z.row(idx[j]);
    }
    clusters.push_back(std::move(c));
  }
  return ClusteredDesign::from_clusters(std::move(clusters));
}

struct PyFit {
  ClusteredDesign design;
  PqlFit fit;

  py::dict interval_dict(const IntervalResult& iv) const {
    py::dict d;
    d["estimate"] = iv.estimate;
    d["lower"] = iv.lower;
    d["upper"] = iv.upper;
    d["level"] = iv.level;
    d["basis"] = basis_label(iv.basis);
    d["regime"] = iv.regime;
    return d;
  }
};

PyFit fit_arrays(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                 const Eigen::MatrixXd& Z, const std::vector<long>& cluster_ids,
                 const std::string& family_tag, int trials, double grad_tol,
                 int max_newton_iters, int max_outer_iters,
                 const std::string& g_update_mode, double g_update_tol,
                 double init_G_scale, double init_phi) {
  const Family family = Family::from_tag(family_tag, trials);
  ClusteredDesign design = design_from_arrays(y, X, Z, cluster_ids);
  design.validate_responses(family);

  SolverConfig config;
  config.grad_tol = grad_tol;
  config.max_newton_iters = max_newton_iters;
  config.max_outer_iters = max_outer_iters;
  config.g_update_tol = g_update_tol;
  if (g_update_mode == "sample_cov") {
    config.g_update_mode = GUpdateMode::sample_cov;
  } else if (g_update_mode == "fixed") {
    config.g_update_mode = GUpdateMode::fixed;
  } else {
    throw std::invalid_argument("g_update_mode must be sample_cov or fixed");
  }
  const MatrixXd init_G =
      MatrixXd::Identity(design.p_r, design.p_r) * init_G_scale;
  PyFit out{std::move(design), {}};
  out.fit = fit_pql(out.design, family, config, init_G, init_phi);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Penalized quasi-likelihood estimation and inference for "
            "independent-cluster GLMMs";

  py::class_<PyFit>(m, "Fit")
      .def_property_readonly("beta",
                             [](const PyFit& f) { return f.fit.theta.beta; })
      .def_property_readonly("b", [](const PyFit& f) { return f.fit.theta.b; })
      .def_property_readonly("G_hat", [](const PyFit& f) { return f.fit.G_hat; })
      .def_property_readonly("G_sample",
                             [](const PyFit& f) { return f.fit.G_sample; })
      .def_property_readonly("converged",
                             [](const PyFit& f) { return f.fit.converged; })
      .def_property_readonly("newton_iters",
                             [](const PyFit& f) { return f.fit.newton_iters_total; })
      .def_property_readonly("outer_iters",
                             [](const PyFit& f) { return f.fit.outer_iters; })
      .def_property_readonly("final_grad_norm",
                             [](const PyFit& f) { return f.fit.final_grad_norm; })
      .def_property_readonly("sum_b_inf",
                             [](const PyFit& f) { return f.fit.sum_b_inf; })
      .def_property_readonly("warnings",
                             [](const PyFit& f) { return f.fit.warnings; })
      .def("estimate_dispersion",
           [](const PyFit& f) {
             return estimate_dispersion(f.design, f.fit, f.fit.family);
           })
      .def(
          "conditional_interval",
          [](const PyFit& f, const std::string& kind, int component,
             std::optional<int> cluster, double level, double dispersion) {
            TargetSelection target;
            if (kind == "beta") {
              target = TargetSelection::fixed_effect(component, f.design.p_f);
            } else if (kind == "b") {
              target = TargetSelection::random_effect(cluster.value_or(0),
                                                      component, f.design.p_r);
            } else {
              throw std::invalid_argument("kind must be 'beta' or 'b'");
            }
            InferenceOptions opts;
            opts.dispersion = dispersion;
            return f.interval_dict(
                conditional_interval(f.design, f.fit, target, level, opts));
          },
          py::arg("kind"), py::arg("component"), py::arg("cluster") = py::none(),
          py::arg("level") = 0.95, py::arg("dispersion") = 1.0)
      .def(
          "unconditional_fixed_interval",
          [](const PyFit& f, int k, double level,
             std::optional<Eigen::MatrixXd> G) {
            return f.interval_dict(unconditional_fixed_interval(
                f.fit, k, level, G ? *G : f.fit.G_sample));
          },
          py::arg("k"), py::arg("level") = 0.95, py::arg("G") = py::none())
      .def(
          "prediction_gap_interval",
          [](const PyFit& f, int cluster, double level, const std::string& regime,
             std::uint64_t seed, int n_draws, double dispersion,
             std::optional<Eigen::MatrixXd> G) {
            InferenceOptions opts;
            opts.n_draws = n_draws;
            opts.dispersion = dispersion;
            const auto intervals = prediction_gap_interval(
                f.design, f.fit, cluster, level, Regime::from_tag(regime),
                G ? *G : f.fit.G_sample, seed, opts);
            py::list out;
            for (const auto& iv : intervals) out.append(f.interval_dict(iv));
            return out;
          },
          py::arg("cluster"), py::arg("level") = 0.95, py::arg("regime") = "auto",
          py::arg("seed") = 0, py::arg("n_draws") = 10000,
          py::arg("dispersion") = 1.0, py::arg("G") = py::none())
      .def(
          "linear_predictor_interval",
          [](const PyFit& f, int cluster, const Eigen::VectorXd& a, double level,
             std::uint64_t seed, int n_draws, double dispersion) {
            InferenceOptions opts;
            opts.n_draws = n_draws;
            opts.dispersion = dispersion;
            return f.interval_dict(linear_predictor_interval(
                f.design, f.fit, cluster, a, level, seed, opts));
          },
          py::arg("cluster"), py::arg("a"), py::arg("level") = 0.95,
          py::arg("seed") = 0, py::arg("n_draws") = 10000,
          py::arg("dispersion") = 1.0)
      .def(
          "predictor_check",
          [](const PyFit& f, std::optional<std::vector<Eigen::Index>> subset) {
            std::vector<Eigen::Index> idx;
            if (subset) {
              idx = *subset;
            } else {
              idx.resize(f.fit.m());
              for (Eigen::Index i = 0; i < f.fit.m(); ++i) idx[i] = i;
            }
            const auto check = predictor_distribution_check(f.fit, idx);
            py::dict d;
            d["mean"] = check.mean;
            d["second_moment"] = check.second_moment;
            d["shapiro_p"] = check.shapiro_p;
            return d;
          },
          py::arg("subset") = py::none());

  m.def("fit", &fit_arrays, py::arg("y"), py::arg("X"), py::arg("Z"),
        py::arg("cluster_ids"), py::arg("family"), py::arg("trials") = 1,
        py::arg("grad_tol") = 1e-8, py::arg("max_newton_iters") = 100,
        py::arg("max_outer_iters") = 100,
        py::arg("g_update_mode") = "sample_cov", py::arg("g_update_tol") = 1e-6,
        py::arg("init_G_scale") = 1.0, py::arg("init_phi") = 1.0,
        "Fit an independent-cluster GLMM by penalized quasi-likelihood. "
        "X and Z are N x p row-per-observation designs; cluster_ids groups "
        "rows into clusters (first-appearance order).");

  m.def(
      "shapiro_wilk",
      [](const std::vector<double>& x) {
        const auto r = shapiro_wilk(x);
        return py::make_tuple(r.w, r.p_value);
      },
      py::arg("x"), "Royston AS R94 Shapiro-Wilk test; returns (W, p).");

  m.def("norm_quantile", &norm_quantile, py::arg("p"));

  m.def(
      "simulate_partnered5",
      [](const std::string& family, int m, int n, std::uint64_t seed,
         std::uint64_t replicate, bool conditional) {
        SimDesign d;
        d.family = Family::from_tag(family).kind;
        d.m = m;
        d.n = n;
        d.seed = seed;
        d.regime =
            conditional ? SimRegime::conditional : SimRegime::unconditional;
        auto [data, truth] = generate_partnered5(d, replicate);
        const Eigen::Index N = data.total_obs();
        Eigen::VectorXd y(N);
        Eigen::MatrixXd X(N, data.p_f);
        std::vector<long> ids(N);
        Eigen::Index row = 0;
        for (Eigen::Index i = 0; i < data.m(); ++i) {
          const auto& c = data.clusters[i];
          for (Eigen::Index j = 0; j < c.y.size(); ++j, ++row) {
            y[row] = c.y[j];
            X.row(row) = c.X.row(j);
            ids[row] = static_cast<long>(i);
          }
        }
        py::dict out;
        out["y"] = y;
        out["X"] = X;
        out["cluster_ids"] = ids;
        out["beta_true"] = truth.beta;
        out["b_true"] = truth.b;
        return out;
      },
      py::arg("family") = "poisson", py::arg("m") = 25, py::arg("n") = 25,
      py::arg("seed") = 1, py::arg("replicate") = 0,
      py::arg("conditional") = false,
      "One replicate of the five-covariate partnered simulation design.");
}
