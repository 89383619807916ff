/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "fedgp/kernel.hpp"
#include "fedgp/linalg.hpp"

namespace fedgp {

inline constexpr double kLog2Pi = 1.8378770664093453;

struct GaussianLogdensityGrad {
  double logdensity = 0.0;
  Eigen::MatrixXd grad_cov;   // entrywise d logdensity / d cov
  Eigen::VectorXd grad_mean;  // = cov^{-1} (obs - mean)
};

/// log N(obs | mean, cov) together with the analytic gradients of that
/// scalar in the covariance entries and the mean.
inline GaussianLogdensityGrad gaussian_logdensity_grad(
    const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
    const Eigen::VectorXd& obs, double jitter = 0.0, double max_jitter = 0.0) {
  if (cov.rows() != cov.cols() || cov.rows() != mean.size() ||
      obs.size() != mean.size()) {
    throw std::invalid_argument("gaussian_logdensity_grad: shape mismatch");
  }
  const int n = static_cast<int>(mean.size());
  const linalg::Cholesky chol = linalg::factorize(cov, jitter, max_jitter);
  const Eigen::VectorXd r = obs - mean;
  const Eigen::VectorXd alpha = chol.solve(r);

  GaussianLogdensityGrad out;
  out.logdensity =
      -0.5 * r.dot(alpha) - 0.5 * chol.log_det() - 0.5 * n * kLog2Pi;
  out.grad_mean = alpha;
  out.grad_cov = 0.5 * (alpha * alpha.transpose() - chol.inverse());
  return out;
}

inline GaussianLogdensityGrad gaussian_logdensity_grad(
    const Eigen::VectorXd& mean, const GramMatrix& cov,
    const Eigen::VectorXd& obs) {
  return gaussian_logdensity_grad(mean, cov.materialize(), obs, 0.0,
                                  cov.max_jitter);
}

inline double gaussian_logdensity(const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov,
                                  const Eigen::VectorXd& obs) {
  return gaussian_logdensity_grad(mean, cov, obs).logdensity;
}

}  // namespace fedgp
