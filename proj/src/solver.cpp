#include "pqlglmm/solver.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pqlglmm {

void SolverConfig::validate() const {
  if (max_newton_iters < 1 || max_outer_iters < 1) {
    throw std::invalid_argument("solver config: iteration caps must be >= 1");
  }
  if (!(grad_tol > 0.0) || !(g_update_tol > 0.0)) {
    throw std::invalid_argument("solver config: tolerances must be positive");
  }
  if (step_halving_max < 0 || ridge_floor < 0.0) {
    throw std::invalid_argument("solver config: invalid line-search settings");
  }
}

SchurParts schur_complement(const HessianBlocks& blocks) {
  const Eigen::Index p_f = blocks.B1.rows();
  const Eigen::Index p_r = blocks.B4.rows();
  const Eigen::Index m = static_cast<Eigen::Index>(blocks.B3.size());
  SchurParts parts;
  parts.caps.reserve(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    Eigen::LLT<MatrixXd> llt(blocks.B3[i] + blocks.B4);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("schur: cluster " + std::to_string(i) +
                               " capacitance matrix is singular");
    }
    parts.caps.push_back(llt.solve(MatrixXd::Identity(p_r, p_r)));
  }
  if (p_f == 0) {
    parts.C.resize(0, 0);
    return parts;
  }
  if (blocks.partnered) {
    // C = G^{-1} sum_i (I - cap_i G^{-1}): algebraically equal to
    // B1 - sum_i B2_i cap_i B2_i^T but free of the large-weight cancellation
    MatrixXd sum = MatrixXd::Zero(p_r, p_r);
    for (Eigen::Index i = 0; i < m; ++i) {
      sum += MatrixXd::Identity(p_r, p_r) - parts.caps[i] * blocks.B4;
    }
    parts.C = blocks.B4 * sum;
  } else {
    parts.C = blocks.B1;
    for (Eigen::Index i = 0; i < m; ++i) {
      parts.C.noalias() -= blocks.B2[i] * parts.caps[i] * blocks.B2[i].transpose();
    }
  }
  parts.C = 0.5 * (parts.C + parts.C.transpose()).eval();
  return parts;
}

NewtonStep newton_step(const ClusteredDesign& design, const ThetaState& theta,
                       const WorkingParams& work, const Family& family,
                       const SolverConfig& config) {
  const HessianBlocks blocks = pql_hessian_blocks(design, theta, work, family);
  const VectorXd grad = pql_gradient(design, theta, work, family);
  SchurParts parts = schur_complement(blocks);

  const Eigen::Index p_f = design.p_f;
  const Eigen::Index p_r = design.p_r;
  const Eigen::Index m = design.m();

  NewtonStep step;
  step.delta = VectorXd::Zero(grad.size());

  VectorXd delta_beta(p_f);
  if (p_f > 0) {
    VectorXd rhs(p_f);
    if (blocks.partnered) {
      // key identity: S1 - sum_i S6_i = G^{-1} sum_i b_i, so the reduced
      // system right-hand side is G^{-1} sum_i (b_i + cap_i S6_i)
      VectorXd acc = VectorXd::Zero(p_r);
      for (Eigen::Index i = 0; i < m; ++i) {
        acc += theta.b[i] + parts.caps[i] * grad.segment(p_f + i * p_r, p_r);
      }
      rhs = blocks.B4 * acc;
    } else {
      rhs = grad.head(p_f);
      for (Eigen::Index i = 0; i < m; ++i) {
        rhs.noalias() -=
            blocks.B2[i] * (parts.caps[i] * grad.segment(p_f + i * p_r, p_r));
      }
    }
    Eigen::LLT<MatrixXd> llt(parts.C);
    if (llt.info() != Eigen::Success) {
      step.direction_ok = false;
      MatrixXd ridged = parts.C;
      double ridge = std::max(config.ridge_floor, 1e-12);
      for (int attempt = 0; attempt < 20; ++attempt) {
        ridged.diagonal().array() += ridge;
        llt.compute(ridged);
        if (llt.info() == Eigen::Success) break;
        ridge *= 10.0;
      }
      if (llt.info() != Eigen::Success) {
        throw std::runtime_error("newton: Schur complement not positive definite");
      }
    }
    delta_beta = llt.solve(rhs);
    step.delta.head(p_f) = delta_beta;
  }

  for (Eigen::Index i = 0; i < m; ++i) {
    const VectorXd s6 = grad.segment(p_f + i * p_r, p_r);
    if (p_f == 0) {
      step.delta.segment(p_f + i * p_r, p_r) = parts.caps[i] * s6;
    } else if (blocks.partnered) {
      // cap_i B2_i^T delta = (I - cap_i G^{-1}) delta exactly under partnering
      step.delta.segment(p_f + i * p_r, p_r) =
          parts.caps[i] * (s6 + blocks.B4 * delta_beta) - delta_beta;
    } else {
      step.delta.segment(p_f + i * p_r, p_r) =
          parts.caps[i] * (s6 - blocks.B2[i].transpose() * delta_beta);
    }
  }
  return step;
}

namespace {

ThetaState apply_delta(const ClusteredDesign& design, const ThetaState& theta,
                       const VectorXd& delta, double scale) {
  ThetaState out = theta;
  out.beta += scale * delta.head(design.p_f);
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    out.b[i] += scale * delta.segment(design.p_f + i * design.p_r, design.p_r);
  }
  return out;
}

double objective_or_neg_inf(const ClusteredDesign& design,
                            const ThetaState& theta, const WorkingParams& work,
                            const Family& family) {
  const double value = pql_objective(design, theta, work, family);
  return std::isfinite(value) ? value
                              : -std::numeric_limits<double>::infinity();
}

MatrixXd sample_second_moment(const ThetaState& theta, Eigen::Index p_r) {
  MatrixXd s = MatrixXd::Zero(p_r, p_r);
  for (const auto& bi : theta.b) s.noalias() += bi * bi.transpose();
  return s / static_cast<double>(theta.b.size());
}

MatrixXd eigen_floor(const MatrixXd& a, double floor, bool* floored) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
  if (es.eigenvalues().minCoeff() >= floor) {
    *floored = false;
    return a;
  }
  *floored = true;
  VectorXd vals = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

double sum_b_sup_norm(const ThetaState& theta, Eigen::Index p_r) {
  VectorXd s = VectorXd::Zero(p_r);
  for (const auto& bi : theta.b) s += bi;
  return p_r > 0 ? s.cwiseAbs().maxCoeff() : 0.0;
}

}  // namespace

VectorXd glm_beta_init(const ClusteredDesign& design, const Family& family,
                       int max_iters) {
  const Eigen::Index p_f = design.p_f;
  VectorXd beta = VectorXd::Zero(p_f);
  if (p_f == 0) return beta;

  auto loglik = [&](const VectorXd& coef) {
    double value = 0.0;
    for (const auto& c : design.clusters) {
      const VectorXd eta = c.X * coef;
      for (Eigen::Index j = 0; j < c.y.size(); ++j) {
        value += c.y[j] * eta[j] - cumulant(family, eta[j]);
      }
    }
    return std::isfinite(value) ? value
                                : -std::numeric_limits<double>::infinity();
  };

  double current = loglik(beta);
  for (int it = 0; it < max_iters; ++it) {
    MatrixXd info = MatrixXd::Zero(p_f, p_f);
    VectorXd score = VectorXd::Zero(p_f);
    for (const auto& c : design.clusters) {
      const VectorXd eta = c.X * beta;
      for (Eigen::Index j = 0; j < c.y.size(); ++j) {
        const auto d = cumulant_derivs(family, eta[j]);
        score.noalias() += (c.y[j] - d.mu) * c.X.row(j).transpose();
        info.noalias() += d.var * c.X.row(j).transpose() * c.X.row(j);
      }
    }
    if (score.cwiseAbs().maxCoeff() < 1e-10) break;
    info.diagonal().array() += 1e-12;
    const VectorXd delta = info.ldlt().solve(score);
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 30; ++h) {
      const VectorXd cand = beta + scale * delta;
      const double value = loglik(cand);
      if (value >= current) {
        beta = cand;
        current = value;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) break;
  }
  return beta;
}

PqlFit fit_inner(const ClusteredDesign& design, const WorkingParams& work,
                 const Family& family, const SolverConfig& config,
                 const std::optional<ThetaState>& init) {
  config.validate();
  work.validate();

  PqlFit fit;
  fit.theta = init ? *init : ThetaState::zero(design);
  if (!init && design.p_f > 0) fit.theta.beta = glm_beta_init(design, family);
  fit.family = family;
  fit.G_hat = work.G_hat;
  fit.phi_hat = work.phi_hat;

  double current = objective_or_neg_inf(design, fit.theta, work, family);
  fit.objective_trace.push_back(current);

  int tiny_steps = 0;
  for (int it = 0; it < config.max_newton_iters; ++it) {
    const VectorXd grad = pql_gradient(design, fit.theta, work, family);
    fit.final_grad_norm = grad.cwiseAbs().maxCoeff();
    if (fit.final_grad_norm <= config.grad_tol) {
      fit.converged = true;
      break;
    }
    const NewtonStep step = newton_step(design, fit.theta, work, family, config);
    // stationary at working precision but above grad_tol: the gradient has hit
    // its floating-point noise floor, further iterations cannot reduce it
    const double theta_sup = fit.theta.stacked().cwiseAbs().maxCoeff();
    if (step.delta.cwiseAbs().maxCoeff() <= 1e-13 * (1.0 + theta_sup)) {
      if (++tiny_steps >= 2) {
        fit.warnings.push_back(
            "gradient stalled at " + std::to_string(fit.final_grad_norm) +
            " above grad_tol; iterate stationary at working precision");
        break;
      }
    } else {
      tiny_steps = 0;
    }
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h <= config.step_halving_max; ++h) {
      const ThetaState cand = apply_delta(design, fit.theta, step.delta, scale);
      const double value = objective_or_neg_inf(design, cand, work, family);
      if (std::isfinite(value) &&
          value >= current - 1e-12 * (1.0 + std::fabs(current))) {
        fit.theta = cand;
        current = std::max(current, value);
        fit.objective_trace.push_back(value);
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    ++fit.newton_iters_total;
    if (!accepted) {
      fit.warnings.push_back("line search failed at iteration " +
                             std::to_string(it));
      break;
    }
  }
  if (!fit.converged) {
    fit.final_grad_norm = pql_gradient(design, fit.theta, work, family)
                              .cwiseAbs()
                              .maxCoeff();
    fit.converged = fit.final_grad_norm <= config.grad_tol;
  }
  fit.G_sample = sample_second_moment(fit.theta, design.p_r);
  fit.sum_b_inf = sum_b_sup_norm(fit.theta, design.p_r);
  fit.outer_iters = 1;
  return fit;
}

PqlFit fit_pql(const ClusteredDesign& design, const Family& family,
               const SolverConfig& config, const MatrixXd& init_G,
               double init_phi) {
  config.validate();
  WorkingParams work{init_G, init_phi};
  work.validate();

  std::optional<ThetaState> warm;
  PqlFit fit;
  int outer = 0;
  int newton_total = 0;
  std::vector<std::string> warnings;
  bool outer_converged = config.g_update_mode == GUpdateMode::fixed;
  std::optional<MatrixXd> prev_sample;
  int floor_warnings = 0;

  while (outer < config.max_outer_iters) {
    ++outer;
    fit = fit_inner(design, work, family, config, warm);
    newton_total += fit.newton_iters_total;
    warnings.insert(warnings.end(), fit.warnings.begin(), fit.warnings.end());
    if (config.g_update_mode == GUpdateMode::fixed) break;

    // Convergence is judged on the raw sample-covariance iterates, with the
    // tolerance scaled by the matrix magnitude: the inner solves leave the
    // estimates jittering at roughly grad_tol scale, which bounds how small
    // the Frobenius change can get. The working matrix itself is floored
    // afterwards: the update can approach a boundary fixed point with an
    // eigenvalue at zero, and the floor is kept relative to the dominant
    // eigenvalue so the penalty stiffness G^{-1} stays within what double
    // precision can drive to stationarity.
    if (prev_sample &&
        (fit.G_sample - *prev_sample).norm() <=
            config.g_update_tol * (1.0 + fit.G_sample.norm())) {
      outer_converged = true;
      break;
    }
    prev_sample = fit.G_sample;

    bool floored = false;
    const double max_eig =
        fit.G_sample.selfadjointView<Eigen::Lower>().eigenvalues().maxCoeff();
    const double floor =
        std::max(config.g_eigen_floor, 1e-6 * std::max(0.0, max_eig));
    MatrixXd G_next = eigen_floor(fit.G_sample, floor, &floored);
    if (floored && ++floor_warnings <= 3) {
      warnings.push_back("G update not positive definite at outer iteration " +
                         std::to_string(outer) + "; eigenvalue floor applied");
    }
    work.G_hat = G_next;
    warm = fit.theta;
  }
  if (floor_warnings > 3) {
    warnings.push_back("eigenvalue floor applied at " +
                       std::to_string(floor_warnings) + " outer iterations");
  }

  fit.newton_iters_total = newton_total;
  fit.outer_iters = outer;
  fit.warnings = std::move(warnings);
  fit.G_hat = work.G_hat;
  fit.converged = fit.converged && outer_converged;
  if (!outer_converged) {
    fit.warnings.push_back("G update did not converge within max_outer_iters");
  }
  return fit;
}

double estimate_dispersion(const ClusteredDesign& design, const PqlFit& fit,
                           const Family& family, bool dof_correction) {
  if (family.known_dispersion) return *family.known_dispersion;
  double ss = 0.0;
  for (Eigen::Index i = 0; i < design.m(); ++i) {
    const auto& c = design.clusters[i];
    const VectorXd eta = cluster_eta(c, fit.theta.beta, fit.theta.b[i]);
    for (Eigen::Index j = 0; j < c.y.size(); ++j) {
      const auto d = cumulant_derivs(family, eta[j]);
      const double r = c.y[j] - d.mu;
      ss += r * r / d.var;
    }
  }
  const auto N = design.total_obs();
  const double dof = std::max<double>(
      1.0, static_cast<double>(dof_correction ? N - design.p_f : N));
  return ss / dof;
}

}  // namespace pqlglmm
