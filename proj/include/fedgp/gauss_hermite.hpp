/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

namespace fedgp {

struct GaussHermiteRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

namespace gh_detail {

/// Nodes/weights of the n-point physicists' Gauss-Hermite rule via Newton
/// iteration on the orthonormal Hermite recurrence.
inline GaussHermiteRule compute_rule(int n) {
  constexpr double kPiQuarter = 0.7511255444649425;  // pi^{-1/4}
  GaussHermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const int m = (n + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < m; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) -
          1.85575 * std::pow(2.0 * n + 1.0, -1.0 / 6.0);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * rule.nodes[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * rule.nodes[1];
    } else {
      z = 2.0 * z - rule.nodes[i - 2];
    }
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = kPiQuarter;
      double p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double dz = p1 / pp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    rule.nodes[i] = z;
    rule.nodes[n - 1 - i] = -z;
    rule.weights[i] = 2.0 / (pp * pp);
    rule.weights[n - 1 - i] = rule.weights[i];
  }
  return rule;
}

}  // namespace gh_detail

/// Cached n-point rule; degrees are computed once per process.
inline const GaussHermiteRule& gauss_hermite_rule(int degree) {
  if (degree < 1 || degree > 256) {
    throw std::invalid_argument("gauss_hermite_rule: degree out of range");
  }
  static std::map<int, GaussHermiteRule> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(degree);
  if (it == cache.end()) {
    it = cache.emplace(degree, gh_detail::compute_rule(degree)).first;
  }
  return it->second;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct LogisticGaussian {
  double p = 0.0;     // integral of sigmoid against N(mu, var)
  double dmu = 0.0;   // derivative in mu
  double dvar = 0.0;  // derivative in var
};

/// E[sigmoid(f)] with f ~ N(mu, var) by Gauss-Hermite, plus the derivatives
/// of the quadrature value in (mu, var).
inline LogisticGaussian logistic_gaussian_moments(double mu, double var,
                                                  int degree) {
  if (var < 0.0) throw std::invalid_argument("variance must be >= 0");
  constexpr double kInvSqrtPi = 0.5641895835477563;
  LogisticGaussian out;
  if (var < 1e-14) {
    const double s = sigmoid(mu);
    out.p = s;
    out.dmu = s * (1.0 - s);
    out.dvar = 0.5 * s * (1.0 - s) * (1.0 - 2.0 * s);
    return out;
  }
  const GaussHermiteRule& rule = gauss_hermite_rule(degree);
  const double sd = std::sqrt(2.0 * var);
  double p = 0.0, dmu = 0.0, dvar = 0.0;
  for (int i = 0; i < rule.nodes.size(); ++i) {
    const double x = rule.nodes[i];
    const double w = rule.weights[i];
    const double s = sigmoid(mu + sd * x);
    const double sp = s * (1.0 - s);
    p += w * s;
    dmu += w * sp;
    dvar += w * sp * x;
  }
  out.p = kInvSqrtPi * p;
  out.dmu = kInvSqrtPi * dmu;
  out.dvar = kInvSqrtPi * dvar / sd;
  return out;
}

/// Bernoulli success probability of the logistic-Gaussian integral,
/// clamped strictly inside (0, 1).
inline double predictive_bernoulli(double mu, double var, int degree) {
  const double p = logistic_gaussian_moments(mu, var, degree).p;
  return std::min(1.0 - 1e-12, std::max(1e-12, p));
}

}  // namespace fedgp
