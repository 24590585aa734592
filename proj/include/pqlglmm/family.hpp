#pragma once

#include <optional>
#include <string>

namespace pqlglmm {

enum class FamilyKind { gaussian, poisson, bernoulli, binomial };

// Canonical exponential family: density exp[phi^{-1}{y*theta - a(theta)} +
// c(y,phi)] with theta equal to the linear predictor (canonical link).
struct Family {
  FamilyKind kind = FamilyKind::gaussian;
  // Known dispersion, when the family fixes it (1 for poisson/bernoulli/
  // binomial). Empty for gaussian, where it is estimated.
  std::optional<double> known_dispersion;
  // Number of trials shared by all observations (binomial only).
  int trials = 1;

  static Family gaussian();
  static Family poisson();
  static Family bernoulli();
  static Family binomial(int trials);
  static Family from_tag(const std::string& tag, int trials = 1);

  std::string tag() const;
};

struct CumulantDerivs {
  double mu;     // a'(eta)
  double var;    // a''(eta)
  double third;  // a'''(eta)
};

double cumulant(const Family& family, double eta);
CumulantDerivs cumulant_derivs(const Family& family, double eta);

// Log density at response y, linear predictor eta and dispersion phi.
// Throws std::domain_error when y is outside the family support.
double log_density(const Family& family, double y, double eta, double phi);

bool in_support(const Family& family, double y);

}  // namespace pqlglmm
