#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "pqlglmm/design.hpp"
#include "test_designs.hpp"

namespace {

const std::string cli = PQLGLMM_CLI_PATH;

std::string workdir() {
  static std::string dir = [] {
    char tmpl[] = "/tmp/pqlglmm_cli_XXXXXX";
    const char* d = mkdtemp(tmpl);
    REQUIRE(d != nullptr);
    return std::string(d);
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = cli + " " + args + " >" + workdir() + "/stdout.txt 2>" +
                          workdir() + "/stderr.txt";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

std::string captured_stdout() { return slurp(workdir() + "/stdout.txt"); }

const char* kToyCsv =
    "cluster_id,y,x1,x2\n"
    "A,0.30,1,0.5\n"
    "A,-0.70,1,-1.0\n"
    "A,1.10,1,0.2\n"
    "B,1.40,1,2.0\n"
    "B,0.90,1,0.0\n"
    "B,0.60,1,-0.4\n";

const char* kGaussianConfig = R"({
  "family": "gaussian",
  "columns": {"cluster": "cluster_id", "response": "y",
              "fixed": ["x1", "x2"], "random": ["x1", "x2"]},
  "solver": {"grad_tol": 1e-11, "g_update_mode": "fixed"}
})";

}  // namespace

TEST_CASE("fit artifact matches the dense mixed-model-equation oracle") {
  const std::string dir = workdir();
  spit(dir + "/toy.csv", kToyCsv);
  spit(dir + "/cfg.json", kGaussianConfig);
  const int code = run("fit --data " + dir + "/toy.csv --config " + dir +
                       "/cfg.json --out " + dir + "/fit.json");
  CHECK(code == 0);

  const auto artifact = nlohmann::json::parse(slurp(dir + "/fit.json"));
  CHECK(artifact.at("converged").get<bool>());
  CHECK(artifact.at("cluster_order") ==
        nlohmann::json::array({"A", "B"}));

  // rebuild the same design and solve the Henderson equations densely
  pqlglmm::ClusterData a, b;
  a.X.resize(3, 2);
  a.X << 1, 0.5, 1, -1.0, 1, 0.2;
  a.Z = a.X;
  a.y.resize(3);
  a.y << 0.3, -0.7, 1.1;
  b.X.resize(3, 2);
  b.X << 1, 2.0, 1, 0.0, 1, -0.4;
  b.Z = b.X;
  b.y.resize(3);
  b.y << 1.4, 0.9, 0.6;
  const auto design = pqlglmm::ClusteredDesign::from_clusters({a, b});
  const Eigen::VectorXd mme = pqlglmm::testing::henderson_solve(
      design, Eigen::MatrixXd::Identity(2, 2), 1.0);

  const auto beta = artifact.at("beta").get<std::vector<double>>();
  CHECK(beta[0] == doctest::Approx(mme[0]).epsilon(1e-8));
  CHECK(beta[1] == doctest::Approx(mme[1]).epsilon(1e-8));
  const auto bA = artifact.at("b").at("A").get<std::vector<double>>();
  const auto bB = artifact.at("b").at("B").get<std::vector<double>>();
  CHECK(bA[0] == doctest::Approx(mme[2]).epsilon(1e-8));
  CHECK(bA[1] == doctest::Approx(mme[3]).epsilon(1e-8));
  CHECK(bB[0] == doctest::Approx(mme[4]).epsilon(1e-8));
  CHECK(bB[1] == doctest::Approx(mme[5]).epsilon(1e-8));
}

TEST_CASE("malformed inputs exit with the I/O code") {
  const std::string dir = workdir();
  spit(dir + "/cfg.json", kGaussianConfig);

  SUBCASE("empty file") {
    spit(dir + "/empty.csv", "");
    CHECK(run("fit --data " + dir + "/empty.csv --config " + dir +
              "/cfg.json --out " + dir + "/out.json") == 3);
  }
  SUBCASE("duplicate column names") {
    spit(dir + "/dup.csv", "cluster_id,y,x1,x1\nA,1,1,2\n");
    CHECK(run("fit --data " + dir + "/dup.csv --config " + dir +
              "/cfg.json --out " + dir + "/out.json") == 3);
  }
  SUBCASE("missing cell") {
    spit(dir + "/gap.csv", "cluster_id,y,x1,x2\nA,1,,2\n");
    CHECK(run("fit --data " + dir + "/gap.csv --config " + dir +
              "/cfg.json --out " + dir + "/out.json") == 3);
  }
  SUBCASE("nonexistent file") {
    CHECK(run("fit --data " + dir + "/nope.csv --config " + dir +
              "/cfg.json --out " + dir + "/out.json") == 3);
  }
  SUBCASE("bad config key") {
    spit(dir + "/bad.json", R"({"family": "gaussian", "frobnicate": 1})");
    spit(dir + "/toy.csv", kToyCsv);
    CHECK(run("fit --data " + dir + "/toy.csv --config " + dir +
              "/bad.json --out " + dir + "/out.json") == 1);
  }
}

TEST_CASE("infer validates flags and reproduces intervals under one seed") {
  const std::string dir = workdir();
  spit(dir + "/toy.csv", kToyCsv);
  spit(dir + "/cfg.json", kGaussianConfig);
  REQUIRE(run("fit --data " + dir + "/toy.csv --config " + dir +
              "/cfg.json --out " + dir + "/fit.json") == 0);

  SUBCASE("level validation") {
    CHECK(run("infer --fit " + dir + "/fit.json --data " + dir +
              "/toy.csv --target beta:0 --level 1.5 --seed 1") == 1);
  }
  SUBCASE("round trip determinism") {
    const std::string base = "infer --fit " + dir + "/fit.json --data " + dir +
                             "/toy.csv --target beta:0 --target gap:cluster=A "
                             "--seed 7 --regime auto --out ";
    REQUIRE(run(base + dir + "/iv1.json") == 0);
    REQUIRE(run(base + dir + "/iv2.json") == 0);
    const std::string iv1 = slurp(dir + "/iv1.json");
    CHECK(iv1 == slurp(dir + "/iv2.json"));
    CHECK(iv1.find("\"basis\"") != std::string::npos);
    const auto records = nlohmann::json::parse(iv1);
    CHECK(records.size() == 3);  // beta + two gap components
    CHECK(records[0].at("basis") == "normal");
  }
  SUBCASE("stale artifact is rejected") {
    spit(dir + "/toy2.csv", std::string(kToyCsv) + "B,0.55,1,0.9\n");
    CHECK(run("infer --fit " + dir + "/fit.json --data " + dir +
              "/toy2.csv --target beta:0 --seed 1") == 3);
  }
  SUBCASE("unknown cluster id") {
    CHECK(run("infer --fit " + dir + "/fit.json --data " + dir +
              "/toy.csv --target gap:cluster=Z --seed 1") == 1);
  }
}

TEST_CASE("non-convergence exits with code 2 and a partial artifact") {
  const std::string dir = workdir();
  spit(dir + "/pois.csv",
       "cluster_id,y,x1\nA,3,1\nA,5,1\nA,2,1\nB,9,1\nB,7,1\nB,11,1\n");
  spit(dir + "/hard.json", R"({
    "family": "poisson",
    "columns": {"cluster": "cluster_id", "response": "y",
                "fixed": ["x1"], "random": ["x1"]},
    "solver": {"max_newton_iters": 1, "grad_tol": 1e-15, "g_update_mode": "fixed"}
  })");
  CHECK(run("fit --data " + dir + "/pois.csv --config " + dir +
            "/hard.json --out " + dir + "/partial.json") == 2);
  const auto artifact = nlohmann::json::parse(slurp(dir + "/partial.json"));
  CHECK_FALSE(artifact.at("converged").get<bool>());
}

TEST_CASE("simulate dry run, reports, and determinism") {
  const std::string dir = workdir();
  spit(dir + "/sim.json", R"({
    "model": "partnered5",
    "family": "poisson",
    "regime": "unconditional",
    "grid": {"m": [10], "n": [12]},
    "replicates": 6,
    "targets": ["beta"],
    "seed": 99,
    "n_draws": 500
  })");

  SUBCASE("dry run prints the plan and writes nothing") {
    REQUIRE(run("simulate --config " + dir + "/sim.json --out " + dir +
                "/plan --dry-run") == 0);
    CHECK(captured_stdout().find("\"cells\"") != std::string::npos);
    CHECK_FALSE(std::ifstream(dir + "/plan.csv").good());
  }
  SUBCASE("reports are written and byte-identical across runs") {
    REQUIRE(run("simulate --config " + dir + "/sim.json --out " + dir +
                "/r1 --jobs 2") == 0);
    REQUIRE(run("simulate --config " + dir + "/sim.json --out " + dir +
                "/r2 --jobs 1") == 0);
    const std::string csv1 = slurp(dir + "/r1.csv");
    CHECK(csv1 == slurp(dir + "/r2.csv"));
    CHECK(slurp(dir + "/r1.json") == slurp(dir + "/r2.json"));
    CHECK(csv1.find("coverage") != std::string::npos);
  }
  SUBCASE("bad family tag is a validation error") {
    spit(dir + "/badfam.json", R"({"family": "gamma"})");
    CHECK(run("simulate --config " + dir + "/badfam.json --out " + dir + "/x") == 1);
  }
  SUBCASE("invalid grid is a validation error") {
    spit(dir + "/badgrid.json", R"({"grid": {"m": [], "n": [5]}})");
    CHECK(run("simulate --config " + dir + "/badgrid.json --out " + dir + "/x") == 1);
  }
}

TEST_CASE("show-config prints embedded defaults") {
  CHECK(run("--show-config") == 0);
  const auto defaults = nlohmann::json::parse(captured_stdout());
  CHECK(defaults.at("solver").at("g_update_mode") == "sample_cov");
  CHECK(defaults.at("inference").at("n_draws") == 10000);
}
