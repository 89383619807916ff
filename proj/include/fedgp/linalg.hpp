/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedgp {

/// Thrown when a matrix cannot be Cholesky-factorized, even after the
/// allowed jitter escalation.
class FactorizationError : public std::runtime_error {
 public:
  explicit FactorizationError(const std::string& what)
      : std::runtime_error(what) {}
};

namespace linalg {

namespace detail {
inline std::atomic<long>& chol_count() {
  static std::atomic<long> c{0};
  return c;
}
inline std::atomic<int>& chol_max_dim() {
  static std::atomic<int> d{0};
  return d;
}
}  // namespace detail

/// Counters over every dense Cholesky performed through this header.
/// Tests use them to prove that sparse code paths never factorize a
/// full N-by-N matrix.
struct CholeskyStats {
  long count = 0;
  int max_dim = 0;
};

inline CholeskyStats cholesky_stats() {
  return {detail::chol_count().load(), detail::chol_max_dim().load()};
}

inline void reset_cholesky_stats() {
  detail::chol_count().store(0);
  detail::chol_max_dim().store(0);
}

/// A dense Cholesky factor plus the diagonal jitter that was actually
/// applied to obtain it.
class Cholesky {
 public:
  Cholesky() = default;

  const Eigen::LLT<Eigen::MatrixXd>& llt() const { return llt_; }
  double jitter() const { return jitter_; }
  int dim() const { return static_cast<int>(llt_.matrixLLT().rows()); }

  double log_det() const {
    return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  }

  template <typename Derived>
  auto solve(const Eigen::MatrixBase<Derived>& b) const {
    return llt_.solve(b.derived()).eval();
  }

  /// L^{-1} b (forward substitution only).
  template <typename Derived>
  auto half_solve(const Eigen::MatrixBase<Derived>& b) const {
    return llt_.matrixL().solve(b.derived()).eval();
  }

  /// L z for z-standard-normal sampling.
  Eigen::VectorXd lower_times(const Eigen::VectorXd& z) const {
    return llt_.matrixL() * z;
  }

  Eigen::MatrixXd inverse() const {
    const int n = dim();
    return llt_.solve(Eigen::MatrixXd::Identity(n, n));
  }

 private:
  friend Cholesky factorize(const Eigen::MatrixXd&, double, double);
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double jitter_ = 0.0;
};

/// Factorizes a symmetric matrix, adding `jitter` to the diagonal and
/// escalating it tenfold up to `max_jitter` on failure. `jitter == 0`
/// with `max_jitter == 0` means a single strict attempt.
inline Cholesky factorize(const Eigen::MatrixXd& m, double jitter = 0.0,
                          double max_jitter = 0.0) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("factorize: matrix must be square");
  }
  const int n = static_cast<int>(m.rows());
  detail::chol_count().fetch_add(1);
  int prev = detail::chol_max_dim().load();
  while (prev < n && !detail::chol_max_dim().compare_exchange_weak(prev, n)) {
  }

  Cholesky out;
  double j = jitter;
  while (true) {
    Eigen::MatrixXd work = m;
    if (j > 0.0) work.diagonal().array() += j;
    out.llt_.compute(work);
    if (out.llt_.info() == Eigen::Success &&
        out.llt_.matrixLLT().diagonal().minCoeff() > 0.0) {
      out.jitter_ = j;
      return out;
    }
    const double next = (j > 0.0) ? j * 10.0 : max_jitter * 1e-3;
    if (next <= 0.0 || next > max_jitter * (1.0 + 1e-12)) {
      throw FactorizationError(
          "factorize: matrix not positive definite after jitter escalation "
          "(dim " +
          std::to_string(n) + ", last jitter " + std::to_string(j) + ")");
    }
    j = next;
  }
}

}  // namespace linalg
}  // namespace fedgp
