/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "fedgp/rng.hpp"

namespace fedgp {

/// Shape/tilt parameters of a Polya-Gamma distribution PG(b, c).
struct PGParams {
  double b = 1.0;
  double c = 0.0;
};

namespace pg_detail {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTruncation = 0.64;  // left/right split point of the proposal

inline double log_cosh(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - 0.6931471805599453;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// CDF at t of an inverse Gaussian with mean 1/z and shape 1; z = 0 is the
/// degenerate infinite-mean limit.
inline double invgauss_cdf(double t, double z) {
  const double rt = std::sqrt(t);
  if (z <= 0.0) return 2.0 * normal_cdf(-1.0 / rt);
  const double a = (t * z - 1.0) / rt;
  const double b = (t * z + 1.0) / rt;
  double tail = 0.0;
  const double phi = normal_cdf(-b);
  if (phi > 0.0) tail = std::exp(2.0 * z + std::log(phi));
  return normal_cdf(a) + tail;
}

/// One draw from an inverse Gaussian IG(1/z, 1) truncated to (0, t].
inline double truncated_invgauss(double z, double t, Rng& g) {
  if (z <= 0.0 || 1.0 / z > t) {
    // Large-mean regime: propose from the stable-law tail representation
    // and thin by the exponential tilt.
    while (true) {
      double e1, e2;
      do {
        e1 = rng::exponential(g);
        e2 = rng::exponential(g);
      } while (e1 * e1 > 2.0 * e2 / t);
      const double x = t / ((1.0 + t * e1) * (1.0 + t * e1));
      if (z <= 0.0 || rng::uniform(g) <= std::exp(-0.5 * z * z * x)) return x;
    }
  }
  const double mu = 1.0 / z;
  while (true) {
    double y = rng::normal(g);
    y *= y;
    double x = mu + 0.5 * mu * mu * y -
               0.5 * mu * std::sqrt(4.0 * mu * y + mu * mu * y * y);
    if (rng::uniform(g) > mu / (mu + x)) x = mu * mu / x;
    if (x <= t && x > 0.0) return x;
  }
}

/// Piecewise series coefficients of the tilted Jacobi density.
inline double series_coef(int n, double x) {
  const double k = n + 0.5;
  if (x <= kTruncation) {
    return kPi * k * std::pow(2.0 / (kPi * x), 1.5) *
           std::exp(-2.0 * k * k / x);
  }
  return kPi * k * std::exp(-0.5 * k * k * kPi * kPi * x);
}

/// Exact draw from the tilted Jacobi distribution J*(1, z), z >= 0, by the
/// Devroye-style alternating-series rejection sampler.
inline double sample_jacobi_star(double z, Rng& g) {
  const double t = kTruncation;
  const double rate = kPi * kPi / 8.0 + 0.5 * z * z;
  const double p = (kPi / (2.0 * rate)) * std::exp(-rate * t);
  const double q = 2.0 * std::exp(-z) * invgauss_cdf(t, z);
  const double right_mass = p / (p + q);

  while (true) {
    double x;
    if (rng::uniform(g) < right_mass) {
      x = t + rng::exponential(g) / rate;
    } else {
      x = truncated_invgauss(z, t, g);
    }
    double s = series_coef(0, x);
    if (!(s > 0.0)) continue;  // proposal far in the tail, degenerate series
    const double y = rng::uniform(g) * s;
    int n = 0;
    bool accepted = false;
    while (true) {
      ++n;
      if (n % 2 == 1) {
        s -= series_coef(n, x);
        if (y <= s) {
          accepted = true;
          break;
        }
      } else {
        s += series_coef(n, x);
        if (y > s) break;
      }
    }
    if (accepted) return x;
  }
}

inline void check_shape(double b) {
  if (!(b > 0.0)) throw std::invalid_argument("PG shape b must be positive");
  if (std::abs(b - std::round(b)) > 1e-12) {
    throw std::invalid_argument("PG shape b must be a positive integer");
  }
}

}  // namespace pg_detail

/// E[PG(b, c)] = (b / 2c) tanh(c / 2), with the analytic limit b/4 at c = 0.
inline double pg_mean(const PGParams& params) {
  pg_detail::check_shape(params.b);
  const double c = params.c;
  if (std::abs(c) < 1e-4) return params.b / 4.0 * (1.0 - c * c / 12.0);
  return params.b / (2.0 * c) * std::tanh(0.5 * c);
}

/// Var[PG(b, c)], analytic limit b/24 at c = 0.
inline double pg_variance(const PGParams& params) {
  pg_detail::check_shape(params.b);
  const double c = std::abs(params.c);
  if (c < 1e-3) return params.b / 24.0 - params.b * c * c / 120.0;
  const double x = 0.5 * c;
  const double sech = 1.0 / std::cosh(x);
  return params.b * (std::tanh(x) - x * sech * sech) / (2.0 * c * c * c);
}

/// One exact draw from PG(b, c); b must be a positive integer (the model
/// only ever needs b = 1, larger integer b is a convolution).
inline double sample_pg(const PGParams& params, Rng& g) {
  pg_detail::check_shape(params.b);
  const double z = 0.5 * std::abs(params.c);
  const int reps = static_cast<int>(std::llround(params.b));
  double sum = 0.0;
  for (int i = 0; i < reps; ++i) sum += pg_detail::sample_jacobi_star(z, g);
  return 0.25 * sum;
}

/// Draw from PG(b, c) via the truncated infinite gamma convolution
/// (test oracle / fallback path).
inline double sample_pg_series(const PGParams& params, Rng& g,
                               int n_terms = 200) {
  pg_detail::check_shape(params.b);
  if (n_terms < 1) throw std::invalid_argument("n_terms must be >= 1");
  const double c2 = params.c * params.c / (4.0 * pg_detail::kPi * pg_detail::kPi);
  double sum = 0.0;
  for (int k = 1; k <= n_terms; ++k) {
    const double d = (k - 0.5) * (k - 0.5) + c2;
    sum += rng::gamma(g, params.b) / d;
  }
  return sum / (2.0 * pg_detail::kPi * pg_detail::kPi);
}

/// log of the exponential-tilt factor density_PG(w | 1, c) / density_PG(w | 1, 0).
/// Ratios of PG densities at different tilts need only this factor; the
/// intractable base density cancels.
inline double pg_log_tilt(double omega, double c) {
  return pg_detail::log_cosh(0.5 * c) - 0.5 * c * c * omega;
}

struct PGIdentitySides {
  double lhs = 0.0;
  double rhs = 0.0;
  double rhs_stderr = 0.0;
};

/// Evaluates both sides of the integral identity
///   (e^f)^a / (1 + e^f)^b = 2^{-b} e^{kf} E_w[e^{-w f^2 / 2}],
/// with k = a - b/2 and w ~ PG(b, 0); the right side by Monte Carlo.
inline PGIdentitySides pg_identity_sides(double a, double b, double f,
                                         long n_mc, Rng& g) {
  pg_detail::check_shape(b);
  if (n_mc < 1) throw std::invalid_argument("n_mc must be >= 1");
  PGIdentitySides out;
  const double softplus =
      f > 0.0 ? f + std::log1p(std::exp(-f)) : std::log1p(std::exp(f));
  out.lhs = std::exp(a * f - b * softplus);

  const double kappa = a - 0.5 * b;
  const double scale = std::exp(kappa * f - b * 0.6931471805599453);
  double sum = 0.0, sum2 = 0.0;
  for (long i = 0; i < n_mc; ++i) {
    const double w = sample_pg({b, 0.0}, g);
    const double v = scale * std::exp(-0.5 * w * f * f);
    sum += v;
    sum2 += v * v;
  }
  out.rhs = sum / static_cast<double>(n_mc);
  const double var = std::max(0.0, sum2 / n_mc - out.rhs * out.rhs);
  out.rhs_stderr = std::sqrt(var / n_mc);
  return out;
}

inline std::pair<double, double> pg_identity_lhs_rhs(double a, double b,
                                                     double f, long n_mc,
                                                     Rng& g) {
  const PGIdentitySides s = pg_identity_sides(a, b, f, n_mc, g);
  return {s.lhs, s.rhs};
}

}  // namespace fedgp
