#include "pqlglmm/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace pqlglmm {

Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov, const std::string& what) {
  if (cov.size() == 0) return cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double min_eig = es.eigenvalues().minCoeff();
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (min_eig < -1e-10 * scale) {
    throw std::runtime_error(what + " is not positive semidefinite (min eigenvalue " +
                             std::to_string(min_eig) + ")");
  }
  const Eigen::VectorXd vals = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * vals.asDiagonal();
}

}  // namespace pqlglmm
