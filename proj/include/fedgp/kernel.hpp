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

#include "fedgp/linalg.hpp"

namespace fedgp {

/// RBF kernel over embedding space: k(a, b) = s * exp(-||a-b||^2 / (2 l^2)).
/// Both scales are fixed hyperparameters, not learned.
struct KernelConfig {
  double length_scale = 1.0;
  double output_scale = 8.0;

  void validate() const {
    if (!(length_scale > 0.0) || !(output_scale > 0.0)) {
      throw std::invalid_argument("kernel scales must be strictly positive");
    }
  }
  double base_jitter() const { return 1e-4 * output_scale; }
  double max_jitter() const { return 1e-1 * output_scale; }
};

/// Square kernel matrix plus the diagonal jitter policy under which it is
/// factorized. `values` holds raw kernel evaluations; jitter is applied at
/// factorization time.
struct GramMatrix {
  Eigen::MatrixXd values;
  double jitter = 0.0;
  double max_jitter = 0.0;

  int n() const { return static_cast<int>(values.rows()); }
  Eigen::MatrixXd materialize() const {
    Eigen::MatrixXd out = values;
    out.diagonal().array() += jitter;
    return out;
  }
  linalg::Cholesky factorize() const {
    return linalg::factorize(values, jitter, max_jitter);
  }
};

/// Cross-kernel matrix, entry (i, j) = k(A_i, B_j).
inline Eigen::MatrixXd gram(const KernelConfig& cfg, const Eigen::MatrixXd& A,
                            const Eigen::MatrixXd& B) {
  cfg.validate();
  if (A.cols() != B.cols()) {
    throw std::invalid_argument("gram: row widths differ");
  }
  const double inv2l2 = 1.0 / (2.0 * cfg.length_scale * cfg.length_scale);
  Eigen::MatrixXd out(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
      const double d2 = (A.row(i) - B.row(j)).squaredNorm();
      out(i, j) = cfg.output_scale * std::exp(-d2 * inv2l2);
    }
  }
  return out;
}

inline GramMatrix gram_self(const KernelConfig& cfg, const Eigen::MatrixXd& A) {
  GramMatrix g;
  g.values = gram(cfg, A, A);
  g.jitter = cfg.base_jitter();
  g.max_jitter = cfg.max_jitter();
  return g;
}

/// k(x, x) for any x under this kernel.
inline double gram_diag_value(const KernelConfig& cfg) {
  return cfg.output_scale;
}

/// Accumulates d(objective)/dA and d(objective)/dB given the upstream
/// gradient G with entries dObjective/dK_ij and the forward values K.
inline void gram_backward(const KernelConfig& cfg, const Eigen::MatrixXd& A,
                          const Eigen::MatrixXd& B, const Eigen::MatrixXd& K,
                          const Eigen::MatrixXd& G, Eigen::MatrixXd& dA,
                          Eigen::MatrixXd& dB) {
  const double invl2 = 1.0 / (cfg.length_scale * cfg.length_scale);
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
      const double w = G(i, j) * K(i, j) * invl2;
      if (w == 0.0) continue;
      const Eigen::RowVectorXd diff = B.row(j) - A.row(i);
      dA.row(i) += w * diff;
      dB.row(j) -= w * diff;
    }
  }
}

/// Backward of the self-gram K = gram(A, A); returns dObjective/dA with the
/// contributions of both index roles of every row.
inline Eigen::MatrixXd gram_self_backward(const KernelConfig& cfg,
                                          const Eigen::MatrixXd& A,
                                          const Eigen::MatrixXd& K,
                                          const Eigen::MatrixXd& G) {
  const double invl2 = 1.0 / (cfg.length_scale * cfg.length_scale);
  Eigen::MatrixXd dA = Eigen::MatrixXd::Zero(A.rows(), A.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < A.rows(); ++j) {
      if (i == j) continue;
      const double w = (G(i, j) + G(j, i)) * K(i, j) * invl2;
      if (w == 0.0) continue;
      dA.row(i) += w * (A.row(j) - A.row(i));
    }
  }
  return dA;
}

}  // namespace fedgp
