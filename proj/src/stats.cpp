#include "pqlglmm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pqlglmm {

double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("norm_quantile: p must be in (0,1)");
  }
  const double q = p - 0.5;
  double r;
  if (std::fabs(q) <= 0.425) {
    r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) *
                    r +
                4.5921953931549871457e4) *
                   r +
               1.3731693765509461125e4) *
                  r +
              1.9715909503065514427e3) *
                 r +
             1.3314166789178437745e2) *
                r +
            3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) *
                    r +
                2.1213794301586595867e4) *
                   r +
               5.3941960214247511077e3) *
                  r +
              6.8718700749205790830e2) *
                 r +
             4.2313330701600911252e1) *
                r +
            1.0);
  }
  r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) *
                   r +
               1.27045825245236838258e0) *
                  r +
              3.64784832476320460504e0) *
                 r +
             5.76949722146069140550e0) *
                r +
            4.63033784615654529590e0) *
               r +
           1.42343711074968357734e0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) *
                   r +
               1.48103976427480074590e-1) *
                  r +
              6.89767334985100004550e-1) *
                 r +
             1.67638483018380384940e0) *
                r +
            2.05319162663775882187e0) *
               r +
           1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) *
                   r +
               2.65321895265761230930e-2) *
                  r +
              2.96560571828504891230e-1) *
                 r +
             1.78482653991729133580e0) *
                r +
            5.46378491116411436990e0) *
               r +
           6.65790464350110377720e0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) *
                   r +
               7.86869131145613259100e-4) *
                  r +
              1.48753612908506148525e-2) *
                 r +
             1.36929880922735805310e-1) *
                r +
            5.99832206555887937690e-1) *
               r +
           1.0);
  }
  return q < 0.0 ? -val : val;
}

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile_sorted: empty sample");
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("quantile_sorted: p must be in [0,1]");
  }
  const std::size_t n = sorted.size();
  const double h = (static_cast<double>(n) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

SampleMoments sample_moments(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("sample_moments: need at least 2 values");
  SampleMoments out;
  for (double v : x) out.mean += v;
  out.mean /= static_cast<double>(n);
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = v - out.mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  out.variance = m2 / static_cast<double>(n - 1);
  m2 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  out.excess_kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  return out;
}

namespace {

double poly(const double* c, int order, double x) {
  double value = c[0];
  double xp = 1.0;
  for (int i = 1; i <= order; ++i) {
    xp *= x;
    value += c[i] * xp;
  }
  return value;
}

}  // namespace

ShapiroResult shapiro_wilk(std::span<const double> sample) {
  const int n = static_cast<int>(sample.size());
  if (n < 3 || n > 5000) {
    throw std::invalid_argument("shapiro_wilk: sample size must be in [3,5000]");
  }
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double range = x.back() - x.front();
  if (!(range > 0.0)) {
    throw std::invalid_argument("shapiro_wilk: sample has zero range");
  }

  // Expected normal order statistics (Blom scores) and Royston's weights.
  const int half = n / 2;
  std::vector<double> m(half);
  double ssumm2 = 0.0;
  for (int i = 0; i < half; ++i) {
    m[i] = norm_quantile((i + 1 - 0.375) / (n + 0.25));
    ssumm2 += 2.0 * m[i] * m[i];
  }

  std::vector<double> a(half);
  const double rsn = 1.0 / std::sqrt(static_cast<double>(n));
  if (n == 3) {
    a[0] = 0.70710678118654752440;
  } else {
    static const double c1[6] = {0.0, 0.221157,  -0.147981,
                                 -2.071190, 4.434685, -2.706056};
    static const double c2[6] = {0.0, 0.042981,  -0.293762,
                                 -1.752461, 5.682633, -3.582633};
    const double sqrt_ssumm2 = std::sqrt(ssumm2);
    const double a_n = -m[0] / sqrt_ssumm2 + poly(c1, 5, rsn);
    double fac;
    int shift;
    if (n > 5) {
      const double a_n1 = -m[1] / sqrt_ssumm2 + poly(c2, 5, rsn);
      fac = std::sqrt((ssumm2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) /
                      (1.0 - 2.0 * a_n * a_n - 2.0 * a_n1 * a_n1));
      a[0] = a_n;
      a[1] = a_n1;
      shift = 2;
    } else {
      fac = std::sqrt((ssumm2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a_n * a_n));
      a[0] = a_n;
      shift = 1;
    }
    for (int i = shift; i < half; ++i) a[i] = -m[i] / fac;
  }

  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double ssq = 0.0;
  for (double v : x) ssq += (v - mean) * (v - mean);

  double num = 0.0;
  for (int i = 0; i < half; ++i) num += a[i] * (x[n - 1 - i] - x[i]);
  const double w = std::min(1.0, num * num / ssq);

  ShapiroResult out;
  out.w = w;
  if (n == 3) {
    const double pi6 = 1.90985931710274;   // 6/pi
    const double stqr = 1.04719755119660;  // asin(sqrt(3/4))
    double p = pi6 * (std::asin(std::sqrt(w)) - stqr);
    out.p_value = std::clamp(p, 0.0, 1.0);
    return out;
  }
  double mu, sigma, z;
  if (n <= 11) {
    const double gamma = 0.459 * n - 2.273;
    const double arg = gamma - std::log1p(-w);
    if (arg <= 0.0) {
      out.p_value = 0.0;  // beyond the fitted range, extreme non-normality
      return out;
    }
    const double y = -std::log(arg);
    static const double c3[4] = {0.5440, -0.39978, 0.025054, -0.0006714};
    static const double c4[4] = {1.3822, -0.77857, 0.062767, -0.0020322};
    mu = poly(c3, 3, static_cast<double>(n));
    sigma = std::exp(poly(c4, 3, static_cast<double>(n)));
    z = (y - mu) / sigma;
  } else {
    const double ln_n = std::log(static_cast<double>(n));
    const double y = std::log1p(-w);
    static const double c5[4] = {-1.5861, -0.31082, -0.083751, 0.0038915};
    static const double c6[3] = {-0.4803, -0.082676, 0.0030302};
    mu = poly(c5, 3, ln_n);
    sigma = std::exp(poly(c6, 2, ln_n));
    z = (y - mu) / sigma;
  }
  out.p_value = 1.0 - norm_cdf(z);
  return out;
}

}  // namespace pqlglmm
