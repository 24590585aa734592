#include "pqlglmm/design.hpp"

#include <stdexcept>
#include <string>

namespace pqlglmm {

Eigen::Index ClusteredDesign::total_obs() const {
  Eigen::Index n = 0;
  for (const auto& c : clusters) n += c.y.size();
  return n;
}

double ClusteredDesign::mean_cluster_size() const {
  return static_cast<double>(total_obs()) / static_cast<double>(m());
}

ClusteredDesign ClusteredDesign::from_clusters(std::vector<ClusterData> clusters) {
  if (clusters.empty()) {
    throw std::invalid_argument("design: need at least one cluster");
  }
  ClusteredDesign d;
  d.p_f = clusters.front().X.cols();
  d.p_r = clusters.front().Z.cols();
  bool partnered = d.p_f == d.p_r && d.p_f > 0;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const auto& c = clusters[i];
    const auto n_i = c.y.size();
    if (n_i < 1) {
      throw std::invalid_argument("design: cluster " + std::to_string(i) +
                                  " is empty");
    }
    if (c.X.rows() != n_i || c.Z.rows() != n_i) {
      throw std::invalid_argument("design: cluster " + std::to_string(i) +
                                  " has inconsistent row counts");
    }
    if (c.X.cols() != d.p_f || c.Z.cols() != d.p_r) {
      throw std::invalid_argument("design: cluster " + std::to_string(i) +
                                  " has inconsistent column counts");
    }
    if (!c.y.allFinite() || !c.X.allFinite() || !c.Z.allFinite()) {
      throw std::invalid_argument("design: cluster " + std::to_string(i) +
                                  " contains non-finite entries");
    }
    if (partnered && c.X != c.Z) partnered = false;
  }
  d.partnered = partnered;
  d.clusters = std::move(clusters);
  return d;
}

void ClusteredDesign::validate_responses(const Family& family) const {
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const auto& y = clusters[i].y;
    for (Eigen::Index j = 0; j < y.size(); ++j) {
      if (!in_support(family, y[j])) {
        throw std::invalid_argument(
            "design: response " + std::to_string(y[j]) + " in cluster " +
            std::to_string(i) + " outside " + family.tag() + " support");
      }
    }
  }
}

ThetaState ThetaState::zero(const ClusteredDesign& design) {
  ThetaState t;
  t.beta = VectorXd::Zero(design.p_f);
  t.b.assign(design.m(), VectorXd::Zero(design.p_r));
  return t;
}

VectorXd ThetaState::stacked() const {
  const Eigen::Index p_f = beta.size();
  const Eigen::Index p_r = b.empty() ? 0 : b.front().size();
  VectorXd v(p_f + static_cast<Eigen::Index>(b.size()) * p_r);
  v.head(p_f) = beta;
  for (std::size_t i = 0; i < b.size(); ++i) {
    v.segment(p_f + static_cast<Eigen::Index>(i) * p_r, p_r) = b[i];
  }
  return v;
}

ThetaState ThetaState::from_stacked(const ClusteredDesign& design,
                                    const VectorXd& v) {
  if (v.size() != design.p_f + design.m() * design.p_r) {
    throw std::invalid_argument("theta: stacked vector has wrong length");
  }
  ThetaState t;
  t.beta = v.head(design.p_f);
  t.b.resize(design.m());
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    t.b[i] = v.segment(design.p_f + i * design.p_r, design.p_r);
  }
  return t;
}

void WorkingParams::validate() const {
  if (G_hat.rows() != G_hat.cols()) {
    throw std::invalid_argument("working params: G_hat must be square");
  }
  if (!(phi_hat > 0.0)) {
    throw std::invalid_argument("working params: phi_hat must be positive");
  }
  const double scale = G_hat.cwiseAbs().maxCoeff();
  if ((G_hat - G_hat.transpose()).cwiseAbs().maxCoeff() >
      1e-12 * std::max(1.0, scale)) {
    throw std::invalid_argument("working params: G_hat is not symmetric");
  }
}

MatrixXd WorkingParams::G_inverse() const {
  validate();
  Eigen::LLT<MatrixXd> llt(G_hat);
  if (llt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(G_hat);
    throw std::runtime_error(
        "working params: G_hat not positive definite (eigenvalue range [" +
        std::to_string(es.eigenvalues().minCoeff()) + ", " +
        std::to_string(es.eigenvalues().maxCoeff()) + "])");
  }
  return llt.solve(MatrixXd::Identity(G_hat.rows(), G_hat.cols()));
}

}  // namespace pqlglmm
