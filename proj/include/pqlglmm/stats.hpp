#pragma once

#include <span>
#include <vector>

namespace pqlglmm {

// Standard normal distribution function.
double norm_cdf(double x);

// Standard normal quantile function, Wichura's PPND16 (AS 241).
// p must lie strictly in (0,1).
double norm_quantile(double p);

// Type-7 quantile (linear interpolation of order statistics) of an already
// sorted sample.
double quantile_sorted(std::span<const double> sorted, double p);

struct SampleMoments {
  double mean = 0.0;
  double variance = 0.0;        // denominator n-1
  double excess_kurtosis = 0.0; // m4/m2^2 - 3
};
SampleMoments sample_moments(std::span<const double> x);

struct ShapiroResult {
  double w = 0.0;
  double p_value = 0.0;
};

// Shapiro-Wilk normality test using Royston's AS R94 approximation.
// Valid for sample sizes 3..5000; throws std::invalid_argument outside that
// range or for a zero-variance sample.
ShapiroResult shapiro_wilk(std::span<const double> sample);

}  // namespace pqlglmm
