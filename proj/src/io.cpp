#include "pqlglmm/io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace pqlglmm {

namespace {

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
    }
  }
}

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed for " + path);
}

Dataset load_dataset_csv(const std::string& path, const ColumnMapping& columns) {
  const std::string raw = read_file(path);
  std::istringstream in(raw);
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) {
    throw IoError(path + ": empty file");
  }
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (index.count(header[k])) {
      throw IoError(path + ": duplicate column name \"" + header[k] + "\"");
    }
    index[header[k]] = k;
  }
  auto column_at = [&](const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end()) {
      throw IoError(path + ": missing column \"" + name + "\"");
    }
    return it->second;
  };

  const std::size_t cluster_col = column_at(columns.cluster);
  const std::size_t response_col = column_at(columns.response);
  if (columns.fixed.empty() && columns.random.empty()) {
    throw IoError(path + ": no covariate columns configured");
  }
  std::vector<std::size_t> fixed_cols, random_cols;
  for (const auto& name : columns.fixed) fixed_cols.push_back(column_at(name));
  for (const auto& name : columns.random) random_cols.push_back(column_at(name));

  struct Rows {
    std::vector<double> y;
    std::vector<std::vector<double>> x;
    std::vector<std::vector<double>> z;
  };
  std::vector<std::string> order;
  std::map<std::string, Rows> by_cluster;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IoError(path + ": row " + std::to_string(line_no) + " has " +
                    std::to_string(cells.size()) + " cells, expected " +
                    std::to_string(header.size()));
    }
    auto numeric = [&](std::size_t col) {
      const std::string& cell = cells[col];
      if (cell.empty()) {
        throw IoError(path + ": row " + std::to_string(line_no) +
                      ", column \"" + header[col] + "\": missing value");
      }
      std::size_t used = 0;
      double value = 0.0;
      try {
        value = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size()) {
        throw IoError(path + ": row " + std::to_string(line_no) +
                      ", column \"" + header[col] + "\": not a number: \"" +
                      cell + "\"");
      }
      return value;
    };

    const std::string id = cells[cluster_col];
    if (id.empty()) {
      throw IoError(path + ": row " + std::to_string(line_no) +
                    ": empty cluster id");
    }
    auto it = by_cluster.find(id);
    if (it == by_cluster.end()) {
      order.push_back(id);
      it = by_cluster.emplace(id, Rows{}).first;
    }
    it->second.y.push_back(numeric(response_col));
    std::vector<double> xrow, zrow;
    for (std::size_t col : fixed_cols) xrow.push_back(numeric(col));
    for (std::size_t col : random_cols) zrow.push_back(numeric(col));
    it->second.x.push_back(std::move(xrow));
    it->second.z.push_back(std::move(zrow));
  }
  if (order.empty()) throw IoError(path + ": no data rows");

  std::vector<ClusterData> clusters;
  for (const auto& id : order) {
    const auto& rows = by_cluster.at(id);
    const Eigen::Index n_i = static_cast<Eigen::Index>(rows.y.size());
    ClusterData c;
    c.y.resize(n_i);
    c.X.resize(n_i, static_cast<Eigen::Index>(fixed_cols.size()));
    c.Z.resize(n_i, static_cast<Eigen::Index>(random_cols.size()));
    for (Eigen::Index j = 0; j < n_i; ++j) {
      c.y[j] = rows.y[j];
      for (std::size_t k = 0; k < fixed_cols.size(); ++k) c.X(j, k) = rows.x[j][k];
      for (std::size_t k = 0; k < random_cols.size(); ++k) c.Z(j, k) = rows.z[j][k];
    }
    clusters.push_back(std::move(c));
  }

  Dataset out;
  try {
    out.design = ClusteredDesign::from_clusters(std::move(clusters));
  } catch (const std::invalid_argument& err) {
    throw IoError(path + ": " + err.what());
  }
  out.cluster_ids = std::move(order);
  out.data_hash = fnv1a(raw);
  return out;
}

SolverConfig solver_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"max_newton_iters", "grad_tol", "max_outer_iters",
                       "g_update_tol", "g_update_mode", "step_halving_max",
                       "ridge_floor", "g_eigen_floor"},
                      "solver");
  SolverConfig config;
  config.max_newton_iters = j.value("max_newton_iters", config.max_newton_iters);
  config.grad_tol = j.value("grad_tol", config.grad_tol);
  config.max_outer_iters = j.value("max_outer_iters", config.max_outer_iters);
  config.g_update_tol = j.value("g_update_tol", config.g_update_tol);
  config.step_halving_max = j.value("step_halving_max", config.step_halving_max);
  config.ridge_floor = j.value("ridge_floor", config.ridge_floor);
  config.g_eigen_floor = j.value("g_eigen_floor", config.g_eigen_floor);
  const std::string mode = j.value("g_update_mode", std::string("sample_cov"));
  if (mode == "sample_cov") {
    config.g_update_mode = GUpdateMode::sample_cov;
  } else if (mode == "fixed") {
    config.g_update_mode = GUpdateMode::fixed;
  } else {
    throw std::invalid_argument("config: g_update_mode must be sample_cov or fixed");
  }
  config.validate();
  return config;
}

nlohmann::json solver_config_to_json(const SolverConfig& config) {
  return nlohmann::json{
      {"max_newton_iters", config.max_newton_iters},
      {"grad_tol", config.grad_tol},
      {"max_outer_iters", config.max_outer_iters},
      {"g_update_tol", config.g_update_tol},
      {"g_update_mode",
       config.g_update_mode == GUpdateMode::sample_cov ? "sample_cov" : "fixed"},
      {"step_halving_max", config.step_halving_max},
      {"ridge_floor", config.ridge_floor},
      {"g_eigen_floor", config.g_eigen_floor}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"family", "trials", "columns", "solver", "inference",
                       "init"},
                      "run config");
  RunConfig config;
  config.family_tag = j.value("family", config.family_tag);
  config.trials = j.value("trials", 1);
  (void)config.family();  // validates the tag

  if (j.contains("columns")) {
    const auto& c = j.at("columns");
    reject_unknown_keys(c, {"cluster", "response", "fixed", "random"}, "columns");
    config.columns.cluster = c.value("cluster", config.columns.cluster);
    config.columns.response = c.value("response", config.columns.response);
    if (c.contains("fixed")) {
      config.columns.fixed = c.at("fixed").get<std::vector<std::string>>();
    }
    if (c.contains("random")) {
      config.columns.random = c.at("random").get<std::vector<std::string>>();
    }
  }
  if (j.contains("solver")) config.solver = solver_config_from_json(j.at("solver"));
  if (j.contains("inference")) {
    const auto& inf = j.at("inference");
    reject_unknown_keys(inf, {"level", "regime", "n_draws", "seed"}, "inference");
    config.level = inf.value("level", config.level);
    config.regime = inf.value("regime", config.regime);
    config.n_draws = inf.value("n_draws", config.n_draws);
    if (inf.contains("seed")) config.seed = inf.at("seed").get<std::uint64_t>();
  }
  if (j.contains("init")) {
    const auto& init = j.at("init");
    reject_unknown_keys(init, {"G_scale", "phi"}, "init");
    config.init_G_scale = init.value("G_scale", config.init_G_scale);
    config.init_phi = init.value("phi", config.init_phi);
  }
  if (!(config.level > 0.0 && config.level < 1.0)) {
    throw std::invalid_argument("config: level must be in (0,1)");
  }
  if (config.n_draws < 1) {
    throw std::invalid_argument("config: n_draws must be >= 1");
  }
  if (!(config.init_G_scale > 0.0) || !(config.init_phi > 0.0)) {
    throw std::invalid_argument("config: init values must be positive");
  }
  return config;
}

RunConfig RunConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& err) {
    throw IoError(path + ": " + err.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{
      {"family", family_tag},
      {"trials", trials},
      {"columns",
       {{"cluster", columns.cluster},
        {"response", columns.response},
        {"fixed", columns.fixed},
        {"random", columns.random}}},
      {"solver", solver_config_to_json(solver)},
      {"inference",
       {{"level", level},
        {"regime", regime},
        {"n_draws", n_draws}}},
      {"init", {{"G_scale", init_G_scale}, {"phi", init_phi}}}};
}

std::vector<SimDesign> SimConfig::expand() const {
  std::vector<int> ms = grid_m, ns = grid_n;
  if (full_grid) {
    ms = {25, 50, 100, 200, 400};
    ns = {25, 50, 100, 200, 400};
  }
  std::vector<SimDesign> designs;
  for (int m : ms) {
    for (int n : ns) {
      SimDesign d;
      d.model = model;
      d.family = family;
      d.m = m;
      d.n = n;
      d.sigma_b2 = sigma_b2;
      d.regime = regime;
      d.replicates = replicates;
      d.seed = seed;
      d.validate();
      designs.push_back(std::move(d));
    }
  }
  return designs;
}

SimConfig SimConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(
      j,
      {"model", "family", "regime", "grid", "full_grid", "replicates", "targets",
       "level", "seed", "sigma_b2", "use_true_values", "n_draws", "study",
       "g_modes", "solver"},
      "sim config");
  SimConfig config;
  const std::string model = j.value("model", std::string("partnered5"));
  if (model == "partnered5") {
    config.model = SimModel::partnered5;
  } else if (model == "poisson_intercept") {
    config.model = SimModel::poisson_intercept;
  } else {
    throw std::invalid_argument("config: unknown model " + model);
  }
  config.family = Family::from_tag(j.value("family", std::string("poisson"))).kind;
  const std::string regime = j.value("regime", std::string("unconditional"));
  if (regime == "conditional") {
    config.regime = SimRegime::conditional;
  } else if (regime == "unconditional") {
    config.regime = SimRegime::unconditional;
  } else {
    throw std::invalid_argument("config: regime must be conditional or unconditional");
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    reject_unknown_keys(g, {"m", "n"}, "grid");
    if (g.contains("m")) config.grid_m = g.at("m").get<std::vector<int>>();
    if (g.contains("n")) config.grid_n = g.at("n").get<std::vector<int>>();
    if (config.grid_m.empty() || config.grid_n.empty()) {
      throw std::invalid_argument("config: grid axes must be non-empty");
    }
  }
  config.full_grid = j.value("full_grid", false);
  config.replicates = j.value("replicates", config.replicates);
  if (j.contains("targets")) {
    config.targets = j.at("targets").get<std::vector<std::string>>();
  }
  config.level = j.value("level", config.level);
  if (j.contains("seed")) config.seed = j.at("seed").get<std::uint64_t>();
  config.sigma_b2 = j.value("sigma_b2", config.sigma_b2);
  config.use_true_values = j.value("use_true_values", config.use_true_values);
  config.n_draws = j.value("n_draws", config.n_draws);
  config.study = j.value("study", config.study);
  if (config.study != "coverage" && config.study != "gap_normality" &&
      config.study != "frobenius") {
    throw std::invalid_argument("config: unknown study " + config.study);
  }
  if (j.contains("g_modes")) {
    config.g_modes = j.at("g_modes").get<std::vector<std::string>>();
  }
  if (j.contains("solver")) config.solver = solver_config_from_json(j.at("solver"));
  if (config.replicates < 1) {
    throw std::invalid_argument("config: replicates must be >= 1");
  }
  if (!(config.level > 0.0 && config.level < 1.0)) {
    throw std::invalid_argument("config: level must be in (0,1)");
  }
  return config;
}

SimConfig SimConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& err) {
    throw IoError(path + ": " + err.what());
  }
  return from_json(j);
}

nlohmann::json make_fit_artifact(const Dataset& dataset, const RunConfig& config,
                                 const PqlFit& fit, double phi_tilde) {
  nlohmann::json b = nlohmann::json::object();
  for (std::size_t i = 0; i < dataset.cluster_ids.size(); ++i) {
    nlohmann::json v = nlohmann::json::array();
    for (Eigen::Index k = 0; k < fit.theta.b[i].size(); ++k) {
      v.push_back(fit.theta.b[i][k]);
    }
    b[dataset.cluster_ids[i]] = std::move(v);
  }
  nlohmann::json beta = nlohmann::json::array();
  for (Eigen::Index k = 0; k < fit.theta.beta.size(); ++k) {
    beta.push_back(fit.theta.beta[k]);
  }
  return nlohmann::json{
      {"schema", "pqlglmm-fit/1"},
      {"family", fit.family.tag()},
      {"trials", fit.family.trials},
      {"converged", fit.converged},
      {"newton_iters", fit.newton_iters_total},
      {"outer_iters", fit.outer_iters},
      {"final_grad_norm", fit.final_grad_norm},
      {"sum_b_inf", fit.sum_b_inf},
      {"warnings", fit.warnings},
      {"beta", beta},
      {"b", b},
      {"cluster_order", dataset.cluster_ids},
      {"G_hat", matrix_to_json(fit.G_hat)},
      {"G_sample", matrix_to_json(fit.G_sample)},
      {"phi_working", fit.phi_hat},
      {"phi_tilde", phi_tilde},
      {"dims",
       {{"m", dataset.design.m()},
        {"p_f", dataset.design.p_f},
        {"p_r", dataset.design.p_r},
        {"N", dataset.design.total_obs()},
        {"partnered", dataset.design.partnered}}},
      {"data_hash", dataset.data_hash},
      {"columns",
       {{"cluster", config.columns.cluster},
        {"response", config.columns.response},
        {"fixed", config.columns.fixed},
        {"random", config.columns.random}}}};
}

LoadedArtifact load_fit_artifact(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& err) {
    throw IoError(path + ": " + err.what());
  }
  if (j.value("schema", std::string()) != "pqlglmm-fit/1") {
    throw IoError(path + ": not a pqlglmm fit artifact");
  }
  LoadedArtifact out;
  out.family_tag = j.at("family").get<std::string>();
  out.trials = j.value("trials", 1);
  out.data_hash = j.at("data_hash").get<std::uint64_t>();
  out.cluster_ids = j.at("cluster_order").get<std::vector<std::string>>();
  out.phi_tilde = j.value("phi_tilde", 1.0);

  PqlFit& fit = out.fit;
  fit.family = Family::from_tag(out.family_tag, out.trials);
  fit.converged = j.value("converged", false);
  fit.newton_iters_total = j.value("newton_iters", 0);
  fit.outer_iters = j.value("outer_iters", 0);
  fit.final_grad_norm = j.value("final_grad_norm", 0.0);
  fit.sum_b_inf = j.value("sum_b_inf", 0.0);
  fit.phi_hat = j.value("phi_working", 1.0);
  fit.G_hat = matrix_from_json(j.at("G_hat"));
  fit.G_sample = matrix_from_json(j.at("G_sample"));
  const auto beta = j.at("beta").get<std::vector<double>>();
  fit.theta.beta.resize(static_cast<Eigen::Index>(beta.size()));
  for (std::size_t k = 0; k < beta.size(); ++k) {
    fit.theta.beta[static_cast<Eigen::Index>(k)] = beta[k];
  }
  const auto& b = j.at("b");
  for (const auto& id : out.cluster_ids) {
    const auto values = b.at(id).get<std::vector<double>>();
    VectorXd v(static_cast<Eigen::Index>(values.size()));
    for (std::size_t k = 0; k < values.size(); ++k) {
      v[static_cast<Eigen::Index>(k)] = values[k];
    }
    fit.theta.b.push_back(std::move(v));
  }
  return out;
}

}  // namespace pqlglmm
