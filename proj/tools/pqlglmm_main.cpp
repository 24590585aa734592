#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pqlglmm/inference.hpp"
#include "pqlglmm/io.hpp"
#include "pqlglmm/sim.hpp"
#include "pqlglmm/solver.hpp"

namespace {

using namespace pqlglmm;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNotConverged = 2;
constexpr int kExitIo = 3;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag,
                           const std::optional<std::uint64_t>& config) {
  if (flag) return *flag;
  if (config) return *config;
  std::random_device rd;
  const std::uint64_t seed =
      (static_cast<std::uint64_t>(rd()) << 32) ^ static_cast<std::uint64_t>(rd());
  std::fprintf(stderr, "no --seed given; using entropy seed %llu\n",
               static_cast<unsigned long long>(seed));
  return seed;
}

struct TargetRequest {
  std::string raw;
  std::string kind;  // beta | b | gap | eta
  int index = -1;    // beta component
  std::string cluster_id;
  std::optional<int> component;
  std::optional<int> observation;
};

TargetRequest parse_target(const std::string& raw) {
  TargetRequest t;
  t.raw = raw;
  const auto colon = raw.find(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("target \"" + raw +
                                "\": expected kind:spec, e.g. beta:0");
  }
  t.kind = raw.substr(0, colon);
  const std::string spec = raw.substr(colon + 1);
  if (t.kind == "beta") {
    t.index = std::stoi(spec);
    return t;
  }
  if (t.kind != "b" && t.kind != "gap" && t.kind != "eta") {
    throw std::invalid_argument("target \"" + raw + "\": unknown kind " + t.kind);
  }
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("target \"" + raw + "\": expected key=value");
    }
    const std::string key = part.substr(0, eq);
    const std::string value = part.substr(eq + 1);
    if (key == "cluster") {
      t.cluster_id = value;
    } else if (key == "comp") {
      t.component = std::stoi(value);
    } else if (key == "obs") {
      t.observation = std::stoi(value);
    } else {
      throw std::invalid_argument("target \"" + raw + "\": unknown key " + key);
    }
  }
  if (t.cluster_id.empty()) {
    throw std::invalid_argument("target \"" + raw + "\": cluster= is required");
  }
  return t;
}

nlohmann::json interval_json(const IntervalResult& iv, const std::string& target) {
  nlohmann::json j{{"target", target},       {"estimate", iv.estimate},
                   {"lower", iv.lower},      {"upper", iv.upper},
                   {"level", iv.level},      {"basis", basis_label(iv.basis)},
                   {"regime", iv.regime}};
  if (iv.warning) j["warning"] = iv.note;
  return j;
}

int cmd_fit(const std::string& data_path, const std::string& config_path,
            const std::string& out_path) {
  const RunConfig config =
      config_path.empty() ? RunConfig() : RunConfig::load(config_path);
  if (config.columns.fixed.empty() && config.columns.random.empty()) {
    throw std::invalid_argument(
        "config: columns.fixed / columns.random must name the covariates");
  }
  const Family family = config.family();
  const Dataset dataset = load_dataset_csv(data_path, config.columns);
  dataset.design.validate_responses(family);

  const Eigen::Index p_r = dataset.design.p_r;
  const MatrixXd init_G =
      MatrixXd::Identity(p_r, p_r) * config.init_G_scale;
  const PqlFit fit =
      fit_pql(dataset.design, family, config.solver, init_G, config.init_phi);
  const double phi_tilde = estimate_dispersion(dataset.design, fit, family);
  if (family.kind == FamilyKind::gaussian && phi_tilde < 1e-10) {
    std::fprintf(stderr, "warning: Pearson dispersion estimate is degenerate (%g)\n",
                 phi_tilde);
  }

  write_file(out_path, make_fit_artifact(dataset, config, fit, phi_tilde).dump(2) + "\n");
  for (const auto& w : fit.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  if (!fit.converged) {
    std::fprintf(stderr, "fit did not converge (final gradient %.3e)\n",
                 fit.final_grad_norm);
    return kExitNotConverged;
  }
  std::fprintf(stderr, "converged in %d newton / %d outer iterations\n",
               fit.newton_iters_total, fit.outer_iters);
  return kExitOk;
}

int cmd_infer(const std::string& fit_path, const std::string& data_path,
              const std::vector<std::string>& target_specs,
              const std::string& regime_tag, double level,
              const std::optional<std::uint64_t>& seed_flag,
              const std::string& out_path) {
  if (!(level > 0.0 && level < 1.0)) {
    throw std::invalid_argument("--level must be in (0,1)");
  }
  if (target_specs.empty()) {
    throw std::invalid_argument("at least one --target is required");
  }
  LoadedArtifact artifact = load_fit_artifact(fit_path);

  ColumnMapping columns;
  {
    const nlohmann::json j = nlohmann::json::parse(read_file(fit_path));
    const auto& c = j.at("columns");
    columns.cluster = c.at("cluster").get<std::string>();
    columns.response = c.at("response").get<std::string>();
    columns.fixed = c.at("fixed").get<std::vector<std::string>>();
    columns.random = c.at("random").get<std::vector<std::string>>();
  }
  const Dataset dataset = load_dataset_csv(data_path, columns);
  if (dataset.data_hash != artifact.data_hash) {
    throw IoError("data file does not match the fit artifact (hash mismatch)");
  }
  if (!artifact.fit.converged) {
    throw std::runtime_error("fit artifact is not converged; refit first");
  }
  const std::uint64_t seed = resolve_seed(seed_flag, std::nullopt);
  const Regime regime = Regime::from_tag(regime_tag);
  const bool conditional = regime.tag == RegimeTag::conditional;

  std::map<std::string, Eigen::Index> cluster_index;
  for (std::size_t i = 0; i < dataset.cluster_ids.size(); ++i) {
    cluster_index[dataset.cluster_ids[i]] = static_cast<Eigen::Index>(i);
  }

  InferenceOptions opts;
  opts.dispersion = artifact.phi_tilde;

  nlohmann::json records = nlohmann::json::array();
  std::uint64_t target_counter = 0;
  for (const auto& raw : target_specs) {
    const TargetRequest req = parse_target(raw);
    const std::uint64_t target_seed = seed + (target_counter++);
    if (req.kind == "beta") {
      const IntervalResult iv =
          conditional
              ? conditional_interval(
                    dataset.design, artifact.fit,
                    TargetSelection::fixed_effect(req.index, dataset.design.p_f),
                    level, opts)
              : unconditional_fixed_interval(artifact.fit, req.index, level,
                                             artifact.fit.G_sample);
      records.push_back(interval_json(iv, raw));
      continue;
    }
    const auto it = cluster_index.find(req.cluster_id);
    if (it == cluster_index.end()) {
      throw std::invalid_argument("target \"" + raw + "\": unknown cluster id " +
                                  req.cluster_id);
    }
    const Eigen::Index cluster = it->second;
    if (req.kind == "eta") {
      const Eigen::Index obs = req.observation.value_or(0);
      const auto& c = dataset.design.clusters[cluster];
      if (obs < 0 || obs >= c.y.size()) {
        throw std::invalid_argument("target \"" + raw + "\": obs out of range");
      }
      const VectorXd a = c.X.row(obs).transpose();
      const IntervalResult iv =
          conditional
              ? conditional_interval(dataset.design, artifact.fit,
                                     TargetSelection::linear_combo(cluster, a),
                                     level, opts)
              : linear_predictor_interval(dataset.design, artifact.fit, cluster,
                                          a, level, target_seed, opts);
      records.push_back(interval_json(iv, raw));
      continue;
    }
    // b / gap
    if (conditional) {
      if (req.kind == "gap") {
        throw std::invalid_argument(
            "target \"" + raw + "\": gap targets are unconditional (use b:)");
      }
      const int comp = req.component.value_or(0);
      const IntervalResult iv = conditional_interval(
          dataset.design, artifact.fit,
          TargetSelection::random_effect(cluster, comp, dataset.design.p_r),
          level, opts);
      records.push_back(interval_json(iv, raw));
    } else {
      const auto intervals = prediction_gap_interval(
          dataset.design, artifact.fit, cluster, level, regime,
          artifact.fit.G_sample, target_seed, opts);
      if (req.component) {
        const int comp = *req.component;
        if (comp < 0 || comp >= static_cast<int>(intervals.size())) {
          throw std::invalid_argument("target \"" + raw + "\": comp out of range");
        }
        records.push_back(interval_json(intervals[comp], raw));
      } else {
        for (std::size_t k = 0; k < intervals.size(); ++k) {
          records.push_back(interval_json(
              intervals[k], raw + ",comp=" + std::to_string(k)));
        }
      }
    }
  }

  const std::string text = records.dump(2) + "\n";
  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    write_file(out_path, text);
  }
  return kExitOk;
}

int cmd_simulate(const std::string& config_path, const std::string& out_prefix,
                 int jobs, const std::optional<std::uint64_t>& seed_flag,
                 bool dry_run) {
  SimConfig config = SimConfig::load(config_path);
  if (seed_flag) config.seed = *seed_flag;
  const auto designs = config.expand();

  if (dry_run) {
    nlohmann::json plan;
    plan["study"] = config.study;
    plan["cells"] = nlohmann::json::array();
    for (const auto& d : designs) {
      plan["cells"].push_back({{"m", d.m}, {"n", d.n}, {"replicates", d.replicates}});
    }
    plan["seed"] = config.seed;
    plan["targets"] = config.targets;
    plan["g_modes"] = config.g_modes;
    std::fputs((plan.dump(2) + "\n").c_str(), stdout);
    return kExitOk;
  }

  ExperimentOptions options;
  options.level = config.level;
  options.targets = config.targets;
  options.use_true_values = config.use_true_values;
  options.jobs = jobs;
  options.n_draws = config.n_draws;

  std::string csv;
  nlohmann::json json_reports = nlohmann::json::array();
  if (config.study == "frobenius") {
    const auto cells = frobenius_table(designs, config.solver, config.g_modes, jobs);
    csv = frobenius_table_csv(cells);
    for (const auto& c : cells) {
      json_reports.push_back(
          {{"m", c.design.m},
           {"n", c.design.n},
           {"g_mode", c.g_mode},
           {"replicates_used", c.replicates_used},
           {"replicates_dropped", c.replicates_dropped},
           {"frobenius_sample", c.frobenius_sample_mean},
           {"frobenius_working", c.frobenius_working_mean}});
    }
  } else {
    bool first = true;
    for (const auto& d : designs) {
      const ExperimentReport report =
          config.study == "coverage"
              ? run_coverage_experiment(d, config.solver, options)
              : run_gap_normality_study(d, config.solver, options);
      csv += report.to_csv(first);
      first = false;
      json_reports.push_back(nlohmann::json::parse(report.to_json()));
      std::fprintf(stderr, "cell (m=%d, n=%d) done in %.1fs (%d used, %d dropped)\n",
                   d.m, d.n, report.wall_seconds, report.replicates_used,
                   report.replicates_dropped);
    }
  }
  write_file(out_prefix + ".csv", csv);
  write_file(out_prefix + ".json", json_reports.dump(2) + "\n");
  std::fprintf(stderr, "wrote %s.csv and %s.json\n", out_prefix.c_str(),
               out_prefix.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pqlglmm: penalized quasi-likelihood estimation and inference "
               "for independent-cluster GLMMs"};
  app.require_subcommand(0, 1);

  bool show_config = false;
  app.add_flag("--show-config", show_config,
               "print the default run configuration as JSON and exit");

  std::string data_path, config_path, out_path;
  auto* fit = app.add_subcommand("fit", "fit a GLMM from a CSV file");
  fit->add_option("--data", data_path, "input CSV")->required();
  fit->add_option("--config", config_path, "run configuration JSON")->required();
  fit->add_option("--out", out_path, "output fit artifact path")->required();

  std::string fit_artifact_path, infer_data, infer_out, regime_tag = "auto";
  std::vector<std::string> targets;
  double level = 0.95;
  std::optional<std::uint64_t> seed_flag;
  auto* infer = app.add_subcommand("infer", "intervals from a fit artifact");
  infer->add_option("--fit", fit_artifact_path, "fit artifact JSON")->required();
  infer->add_option("--data", infer_data, "the CSV the artifact was fit on")
      ->required();
  infer->add_option("--target", targets,
                    "beta:K | b:cluster=ID[,comp=K] | gap:cluster=ID[,comp=K] | "
                    "eta:cluster=ID[,obs=J] (0-based indices)");
  infer->add_option("--regime", regime_tag,
                    "conditional | auto | many_clusters | balanced | "
                    "large_clusters");
  infer->add_option("--level", level, "interval level in (0,1)");
  infer->add_option("--seed", seed_flag, "Monte Carlo seed");
  infer->add_option("--out", infer_out, "output path (stdout when omitted)");

  std::string sim_config_path, sim_out = "report";
  int jobs = 1;
  bool dry_run = false;
  auto* simulate = app.add_subcommand("simulate", "run a simulation study");
  simulate->add_option("--config", sim_config_path, "simulation config JSON")
      ->required();
  simulate->add_option("--out", sim_out, "output prefix for .csv/.json reports");
  simulate->add_option("--jobs", jobs, "max concurrent replicates");
  simulate->add_option("--seed", seed_flag, "override the config seed");
  simulate->add_flag("--dry-run", dry_run, "print the resolved plan, run nothing");

  CLI11_PARSE(app, argc, argv);

  try {
    if (show_config) {
      std::fputs((pqlglmm::RunConfig().to_json().dump(2) + "\n").c_str(), stdout);
      return kExitOk;
    }
    if (fit->parsed()) return cmd_fit(data_path, config_path, out_path);
    if (infer->parsed()) {
      return cmd_infer(fit_artifact_path, infer_data, targets, regime_tag, level,
                       seed_flag, infer_out);
    }
    if (simulate->parsed()) {
      return cmd_simulate(sim_config_path, sim_out, jobs, seed_flag, dry_run);
    }
    std::fputs(app.help().c_str(), stdout);
    return kExitOk;
  } catch (const pqlglmm::IoError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitIo;
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitUsage;
  } catch (const nlohmann::json::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitIo;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitNotConverged;
  }
}
