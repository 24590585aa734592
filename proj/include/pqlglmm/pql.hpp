#pragma once

#include <Eigen/Dense>
#include <vector>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"

namespace pqlglmm {

// Negated Hessian of the PQL objective in block form. The dense matrix
//   B = [ B1   B2_1 ... B2_m ;
//         B2_i^T  (B3_i + B4) on the block diagonal ]
// is never materialized; B4 = G_hat^{-1} repeats for every cluster.
struct HessianBlocks {
  MatrixXd B1;                // p_f x p_f, sum_i X_i^T W_i X_i
  std::vector<MatrixXd> B2;   // m blocks p_f x p_r, X_i^T W_i Z_i
  std::vector<MatrixXd> B3;   // m blocks p_r x p_r, Z_i^T W_i Z_i
  MatrixXd B4;                // p_r x p_r, G_hat^{-1}
  // X_i = Z_i for every cluster; enables the cancellation-free Schur form
  bool partnered = false;
};

VectorXd cluster_eta(const ClusterData& cluster, const VectorXd& beta,
                     const VectorXd& b);

// PQL objective: sum of conditional log densities minus the quadratic
// random-effect penalty 0.5 * sum_i b_i^T G_hat^{-1} b_i.
double pql_objective(const ClusteredDesign& design, const ThetaState& theta,
                     const WorkingParams& work, const Family& family);

// Gradient stacked in (beta, b_1, ..., b_m) order.
VectorXd pql_gradient(const ClusteredDesign& design, const ThetaState& theta,
                      const WorkingParams& work, const Family& family);

HessianBlocks pql_hessian_blocks(const ClusteredDesign& design,
                                 const ThetaState& theta,
                                 const WorkingParams& work,
                                 const Family& family);

// Dense assembly of the blocks, for small problems and cross-checks.
MatrixXd assemble_dense(const HessianBlocks& blocks);

}  // namespace pqlglmm
