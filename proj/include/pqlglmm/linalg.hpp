#pragma once

#include <Eigen/Dense>
#include <string>

namespace pqlglmm {

// Lower-triangular factor L with L L^T = cov for a symmetric PSD matrix.
// Falls back to an eigendecomposition with negative eigenvalues clamped at
// zero; throws std::runtime_error when the matrix is materially indefinite.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov, const std::string& what);

}  // namespace pqlglmm
