#include "pqlglmm/family.hpp"

#include <cmath>
#include <stdexcept>

namespace pqlglmm {

namespace {

void require_finite(double eta) {
  if (!std::isfinite(eta)) {
    throw std::domain_error("family: linear predictor must be finite");
  }
}

// log(1 + exp(eta)) without overflow for large |eta|.
double softplus(double eta) {
  if (eta > 0.0) return eta + std::log1p(std::exp(-eta));
  return std::log1p(std::exp(eta));
}

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

bool is_integral(double y) { return std::fabs(y - std::round(y)) < 1e-8; }

double log_choose(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

Family Family::gaussian() { return Family{FamilyKind::gaussian, std::nullopt, 1}; }
Family Family::poisson() { return Family{FamilyKind::poisson, 1.0, 1}; }
Family Family::bernoulli() { return Family{FamilyKind::bernoulli, 1.0, 1}; }

Family Family::binomial(int trials) {
  if (trials < 1) throw std::invalid_argument("binomial: trials must be >= 1");
  return Family{FamilyKind::binomial, 1.0, trials};
}

Family Family::from_tag(const std::string& tag, int trials) {
  if (tag == "gaussian") return gaussian();
  if (tag == "poisson") return poisson();
  if (tag == "bernoulli") return bernoulli();
  if (tag == "binomial") return binomial(trials);
  throw std::invalid_argument("unknown family tag: " + tag);
}

std::string Family::tag() const {
  switch (kind) {
    case FamilyKind::gaussian: return "gaussian";
    case FamilyKind::poisson: return "poisson";
    case FamilyKind::bernoulli: return "bernoulli";
    case FamilyKind::binomial: return "binomial";
  }
  return "?";
}

double cumulant(const Family& family, double eta) {
  require_finite(eta);
  switch (family.kind) {
    case FamilyKind::gaussian: return 0.5 * eta * eta;
    case FamilyKind::poisson: return std::exp(eta);
    case FamilyKind::bernoulli: return softplus(eta);
    case FamilyKind::binomial: return family.trials * softplus(eta);
  }
  throw std::logic_error("unreachable");
}

CumulantDerivs cumulant_derivs(const Family& family, double eta) {
  require_finite(eta);
  switch (family.kind) {
    case FamilyKind::gaussian: return {eta, 1.0, 0.0};
    case FamilyKind::poisson: {
      const double e = std::exp(eta);
      return {e, e, e};
    }
    case FamilyKind::bernoulli: {
      const double s = sigmoid(eta);
      const double v = s * (1.0 - s);
      return {s, v, v * (1.0 - 2.0 * s)};
    }
    case FamilyKind::binomial: {
      const double s = sigmoid(eta);
      const double v = s * (1.0 - s);
      const double k = family.trials;
      return {k * s, k * v, k * v * (1.0 - 2.0 * s)};
    }
  }
  throw std::logic_error("unreachable");
}

bool in_support(const Family& family, double y) {
  if (!std::isfinite(y)) return false;
  switch (family.kind) {
    case FamilyKind::gaussian: return true;
    case FamilyKind::poisson: return y >= 0.0 && is_integral(y);
    case FamilyKind::bernoulli: return y == 0.0 || y == 1.0;
    case FamilyKind::binomial:
      return y >= 0.0 && y <= family.trials && is_integral(y);
  }
  return false;
}

double log_density(const Family& family, double y, double eta, double phi) {
  require_finite(eta);
  if (!(phi > 0.0)) throw std::domain_error("family: dispersion must be positive");
  if (!in_support(family, y)) {
    throw std::domain_error("family " + family.tag() + ": response " +
                            std::to_string(y) + " outside support");
  }
  // quasi-likelihood convention: the working dispersion divides the
  // exponential-family kernel for every family
  const double kernel = (y * eta - cumulant(family, eta)) / phi;
  switch (family.kind) {
    case FamilyKind::gaussian:
      return kernel - y * y / (2.0 * phi) - 0.5 * std::log(2.0 * M_PI * phi);
    case FamilyKind::poisson:
      return kernel - std::lgamma(y + 1.0);
    case FamilyKind::bernoulli:
      return kernel;
    case FamilyKind::binomial:
      return kernel + log_choose(family.trials, y);
  }
  throw std::logic_error("unreachable");
}

}  // namespace pqlglmm
