#pragma once

#include <Eigen/Dense>
#include <vector>

#include "pqlglmm/family.hpp"

namespace pqlglmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ClusterData {
  VectorXd y;  // responses, length n_i
  MatrixXd X;  // fixed-effect design, n_i x p_f
  MatrixXd Z;  // random-effect design, n_i x p_r
};

// Independent-cluster design. `partnered` means Z_i == X_i for every cluster,
// i.e. every covariate enters as both a fixed and a random effect.
struct ClusteredDesign {
  std::vector<ClusterData> clusters;
  Eigen::Index p_f = 0;
  Eigen::Index p_r = 0;
  bool partnered = false;

  Eigen::Index m() const { return static_cast<Eigen::Index>(clusters.size()); }
  Eigen::Index total_obs() const;  // N
  double mean_cluster_size() const;

  // Builds a design from per-cluster data, inferring dimensions and the
  // partnered flag. Throws std::invalid_argument on inconsistent shapes or
  // non-finite entries.
  static ClusteredDesign from_clusters(std::vector<ClusterData> clusters);

  // Checks responses against the family support.
  void validate_responses(const Family& family) const;
};

struct ThetaState {
  VectorXd beta;               // length p_f
  std::vector<VectorXd> b;     // m vectors of length p_r

  static ThetaState zero(const ClusteredDesign& design);
  VectorXd stacked() const;    // (beta, b_1, ..., b_m)
  static ThetaState from_stacked(const ClusteredDesign& design, const VectorXd& v);
};

struct WorkingParams {
  MatrixXd G_hat;      // p_r x p_r symmetric positive definite
  double phi_hat = 1.0;

  // Inverse via Cholesky; throws std::runtime_error with a condition
  // diagnostic if G_hat is not positive definite.
  MatrixXd G_inverse() const;
  void validate() const;
};

}  // namespace pqlglmm
