#include "pqlglmm/pql.hpp"

#include <stdexcept>

namespace pqlglmm {

VectorXd cluster_eta(const ClusterData& cluster, const VectorXd& beta,
                     const VectorXd& b) {
  VectorXd eta = cluster.Z * b;
  if (beta.size() > 0) eta += cluster.X * beta;
  return eta;
}

double pql_objective(const ClusteredDesign& design, const ThetaState& theta,
                     const WorkingParams& work, const Family& family) {
  const MatrixXd G_inv = work.G_inverse();
  double value = 0.0;
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    const auto& c = design.clusters[i];
    const VectorXd eta = cluster_eta(c, theta.beta, theta.b[i]);
    for (Eigen::Index j = 0; j < c.y.size(); ++j) {
      value += log_density(family, c.y[j], eta[j], work.phi_hat);
    }
    value -= 0.5 * theta.b[i].dot(G_inv * theta.b[i]);
  }
  return value;
}

VectorXd pql_gradient(const ClusteredDesign& design, const ThetaState& theta,
                      const WorkingParams& work, const Family& family) {
  const MatrixXd G_inv = work.G_inverse();
  const double inv_phi = 1.0 / work.phi_hat;
  VectorXd grad = VectorXd::Zero(design.p_f + design.m() * design.p_r);
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    const auto& c = design.clusters[i];
    const VectorXd eta = cluster_eta(c, theta.beta, theta.b[i]);
    VectorXd resid(c.y.size());
    for (Eigen::Index j = 0; j < c.y.size(); ++j) {
      resid[j] = c.y[j] - cumulant_derivs(family, eta[j]).mu;
    }
    if (design.p_f > 0) grad.head(design.p_f) += inv_phi * (c.X.transpose() * resid);
    grad.segment(design.p_f + i * design.p_r, design.p_r) =
        inv_phi * (c.Z.transpose() * resid) - G_inv * theta.b[i];
  }
  return grad;
}

HessianBlocks pql_hessian_blocks(const ClusteredDesign& design,
                                 const ThetaState& theta,
                                 const WorkingParams& work,
                                 const Family& family) {
  HessianBlocks blocks;
  blocks.partnered = design.partnered;
  blocks.B4 = work.G_inverse();
  blocks.B1 = MatrixXd::Zero(design.p_f, design.p_f);
  blocks.B2.reserve(design.m());
  blocks.B3.reserve(design.m());
  const double inv_phi = 1.0 / work.phi_hat;
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    const auto& c = design.clusters[i];
    const VectorXd eta = cluster_eta(c, theta.beta, theta.b[i]);
    VectorXd w(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j) {
      w[j] = inv_phi * cumulant_derivs(family, eta[j]).var;
    }
    const MatrixXd WX = w.asDiagonal() * c.X;
    const MatrixXd WZ = w.asDiagonal() * c.Z;
    blocks.B1.noalias() += c.X.transpose() * WX;
    blocks.B2.push_back(c.X.transpose() * WZ);
    blocks.B3.push_back(c.Z.transpose() * WZ);
  }
  return blocks;
}

MatrixXd assemble_dense(const HessianBlocks& blocks) {
  const Eigen::Index p_f = blocks.B1.rows();
  const Eigen::Index p_r = blocks.B4.rows();
  const Eigen::Index m = static_cast<Eigen::Index>(blocks.B3.size());
  MatrixXd dense = MatrixXd::Zero(p_f + m * p_r, p_f + m * p_r);
  dense.topLeftCorner(p_f, p_f) = blocks.B1;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index off = p_f + i * p_r;
    dense.block(0, off, p_f, p_r) = blocks.B2[i];
    dense.block(off, 0, p_r, p_f) = blocks.B2[i].transpose();
    dense.block(off, off, p_r, p_r) = blocks.B3[i] + blocks.B4;
  }
  return dense;
}

}  // namespace pqlglmm
