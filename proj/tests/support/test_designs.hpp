#pragma once

// Test-only instance generators and independent oracles. Everything here is
// deliberately written against the definitions (plain loops, dense solves)
// rather than the library's block-structured paths.

#include <Eigen/Dense>
#include <vector>

#include "pqlglmm/design.hpp"
#include "pqlglmm/family.hpp"
#include "pqlglmm/pql.hpp"
#include "pqlglmm/rng.hpp"

namespace pqlglmm::testing {

struct RandomInstance {
  ClusteredDesign design;
  ThetaState theta;      // evaluation point, not a fit
  WorkingParams work;
  Family family;
};

// Random partnered instance with responses drawn from the model itself.
RandomInstance random_instance(RngStream& rng, const Family& family, int m,
                               int max_n, int p, bool partnered = true);

// Direct scalar-arithmetic evaluation of the PQL objective; no matrix algebra
// beyond an explicit dense inverse of G.
double objective_scalar_oracle(const RandomInstance& inst);

// Central finite difference of the objective.
Eigen::VectorXd fd_gradient(const RandomInstance& inst, double h = 1e-6);

// Central finite difference Jacobian of the gradient (negated, so it matches
// the assembled Hessian blocks B).
Eigen::MatrixXd fd_neg_hessian(const RandomInstance& inst, double h = 1e-5);

// Dense Newton direction B^{-1} grad.
Eigen::VectorXd dense_newton_oracle(const RandomInstance& inst);

// Dense Henderson mixed-model-equation solve for the Gaussian identity case.
Eigen::VectorXd henderson_solve(const ClusteredDesign& design,
                                const Eigen::MatrixXd& G_hat, double phi_hat);

}  // namespace pqlglmm::testing
