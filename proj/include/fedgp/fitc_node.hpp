/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

#include "fedgp/gpc_node.hpp"
#include "fedgp/linalg.hpp"
#include "fedgp/polya_gamma.hpp"
#include "fedgp/rng.hpp"

namespace fedgp {

/// Sparse-conditional node built on M pseudo-inputs. Only M-by-M and
/// diagonal systems are ever factorized; the instrumentation counter in
/// linalg.hpp lets tests assert that.
///
/// Notation: Kmm pseudo-input kernel (SPD, jitter already applied),
/// Knm data/pseudo cross kernel, knn_diag the data kernel diagonal,
/// Lambda = Omega^{-1} + diag(knn - q_diag), B = Kmm + Kmn Lambda^{-1} Knm.
class FitcFactors {
 public:
  static constexpr double kLambdaFloor = 1e-8;

  FitcFactors(const Eigen::MatrixXd& Kmm, const Eigen::MatrixXd& Knm,
              const Eigen::VectorXd& knn_diag, const Eigen::VectorXi& y,
              const Eigen::VectorXd& omega)
      : Kmm_(Kmm), Knm_(Knm), knn_diag_(knn_diag), omega_(omega) {
    const int n = static_cast<int>(Knm.rows());
    const int m = static_cast<int>(Kmm.rows());
    if (Kmm.cols() != m || knn_diag.size() != n || y.size() != n ||
        omega.size() != n) {
      throw std::invalid_argument("FitcFactors: block shapes inconsistent");
    }
    if (n > 0 && (omega.array() <= 0.0).any()) {
      throw std::invalid_argument("omega must be strictly positive");
    }
    Lmm_ = linalg::factorize(Kmm);

    // q_diag_i = Knm_i Kmm^{-1} Knm_i', via V = Lmm^{-1} Knm'.
    const Eigen::MatrixXd V = Lmm_.half_solve(Knm.transpose());
    qdiag_ = V.colwise().squaredNorm().transpose();
    dvec_ = (knn_diag - qdiag_).cwiseMax(0.0);

    lambda_.resize(n);
    floored_.assign(n, false);
    for (int i = 0; i < n; ++i) {
      const double raw = 1.0 / omega[i] + knn_diag[i] - qdiag_[i];
      lambda_[i] = raw < kLambdaFloor ? kLambdaFloor : raw;
      floored_[i] = raw < kLambdaFloor;
    }

    const Eigen::MatrixXd Knm_scaled =
        lambda_.cwiseInverse().asDiagonal() * Knm;
    Eigen::MatrixXd B = Kmm + Knm.transpose() * Knm_scaled;
    Lb_ = linalg::factorize(B);

    z_ = kappa_of(y).array() / omega.array();
    zl_ = z_.array() / lambda_.array();
    u_ = Knm.transpose() * zl_;
    w_ = Lb_.solve(u_);
  }

  int n() const { return static_cast<int>(Knm_.rows()); }
  int m() const { return static_cast<int>(Kmm_.rows()); }
  const Eigen::VectorXd& lambda() const { return lambda_; }
  const Eigen::VectorXd& omega() const { return omega_; }
  const Eigen::VectorXd& conditional_diag() const { return dvec_; }
  const linalg::Cholesky& chol_B() const { return Lb_; }

  /// Posterior over the pseudo latent values:
  ///   mean = Kmm B^{-1} Kmn Lambda^{-1} Omega^{-1} kappa,
  ///   cov  = Kmm B^{-1} Kmm.
  struct GaussianDense {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
  };
  GaussianDense posterior_fbar() const {
    GaussianDense out;
    out.mean = Kmm_ * w_;
    out.cov = Kmm_ * Lb_.solve(Kmm_);
    out.cov = 0.5 * (out.cov + out.cov.transpose().eval());
    return out;
  }

  /// Posterior over the data latent values, kept in diagonal-plus-low-rank
  /// form: cov = diag(d) + R' R with R = Lb^{-1} Kmn.
  struct GaussianDiagLowRank {
    Eigen::VectorXd mean;
    Eigen::VectorXd diag;
    Eigen::MatrixXd low_rank;  // M x N factor
    Eigen::MatrixXd dense_cov() const {
      Eigen::MatrixXd c = low_rank.transpose() * low_rank;
      c.diagonal() += diag;
      return c;
    }
  };
  GaussianDiagLowRank posterior_f() const {
    GaussianDiagLowRank out;
    out.mean = Knm_ * w_;
    out.diag = dvec_;
    out.low_rank = Lb_.half_solve(Knm_.transpose());
    return out;
  }

  /// Predictive moments through the pseudo posterior; O(M^2) per point.
  NodePosterior::Predictive predict(const Eigen::VectorXd& kstar,
                                    double kss) const {
    NodePosterior::Predictive p;
    p.mu = kstar.dot(w_);
    const double qa = Lmm_.half_solve(kstar).squaredNorm();
    const double qb = Lb_.half_solve(kstar).squaredNorm();
    p.var = kss - qa + qb;
    if (p.var < 1e-12) p.var = 1e-12;
    return p;
  }

  /// log N(Omega^{-1} kappa | 0, Lambda + Knm Kmm^{-1} Kmn), evaluated via
  /// the Woodbury and determinant identities in O(M^2 N + M^3).
  double marginal_loglik() const {
    const Eigen::VectorXd alpha = cinv_apply(z_);
    const double logdet = lambda_.array().log().sum() + Lb_.log_det() -
                          Lmm_.log_det();
    return -0.5 * z_.dot(alpha) - 0.5 * logdet - 0.5 * n() * kLog2Pi;
  }

  /// One blocked sweep: f from the diagonal-plus-low-rank posterior, then
  /// omega_j ~ PG(1, f_j). Never touches an N-by-N factor.
  Eigen::VectorXd sample_f(Rng& g) const {
    const GaussianDiagLowRank post = posterior_f();
    Eigen::VectorXd f = post.mean;
    for (int i = 0; i < n(); ++i) {
      f[i] += std::sqrt(post.diag[i]) * rng::normal(g);
    }
    Eigen::VectorXd zeta(m());
    for (int j = 0; j < m(); ++j) zeta[j] = rng::normal(g);
    f += post.low_rank.transpose() * zeta;
    return f;
  }

  struct MarginalGrads {
    double value = 0.0;
    Eigen::MatrixXd dKmm;
    Eigen::MatrixXd dKnm;
    Eigen::VectorXd dknn_diag;
  };

  MarginalGrads marginal_grads() const {
    MarginalGrads out;
    out.value = marginal_loglik();
    const int N = n();
    const Eigen::VectorXd alpha = cinv_apply(z_);

    // Diagonal of C^{-1} via the Woodbury low-rank correction.
    const Eigen::MatrixXd R = Lb_.half_solve(Knm_.transpose());  // M x N
    Eigen::VectorXd cinv_diag(N);
    for (int i = 0; i < N; ++i) {
      cinv_diag[i] =
          1.0 / lambda_[i] -
          R.col(i).squaredNorm() / (lambda_[i] * lambda_[i]);
    }
    Eigen::VectorXd gdiag =
        0.5 * (alpha.array().square() - cinv_diag.array());

    // d_tilde keeps the diagonal correction channel only where the
    // Lambda floor is inactive.
    Eigen::VectorXd d_tilde = gdiag;
    out.dknn_diag = gdiag;
    for (int i = 0; i < N; ++i) {
      if (floored_[i]) {
        d_tilde[i] = 0.0;
        out.dknn_diag[i] = 0.0;
      }
    }

    // G Knm without forming G: G = 1/2 (alpha alpha' - C^{-1}).
    const Eigen::MatrixXd CinvKnm =
        lambda_.cwiseInverse().asDiagonal() *
        (Knm_ * Lb_.solve(Kmm_));
    Eigen::MatrixXd GKnm =
        0.5 * (alpha * (alpha.transpose() * Knm_) - CinvKnm);
    GKnm -= d_tilde.asDiagonal() * Knm_;

    // Chain through Q = Knm Kmm^{-1} Kmn.
    out.dKnm = 2.0 * Lmm_.solve(GKnm.transpose()).transpose();
    const Eigen::MatrixXd T = Knm_.transpose() * GKnm;
    const Eigen::MatrixXd TA = Lmm_.solve(T.transpose()).transpose();
    out.dKmm = -Lmm_.solve(TA);
    return out;
  }

  /// Staged accumulator for reverse mode through predict() over many
  /// target points that share this factorization.
  struct PredictBackward {
    Eigen::MatrixXd GA;  // upstream gradient on Kmm^{-1}
    Eigen::MatrixXd GB;  // upstream gradient on B
    Eigen::VectorXd du;  // upstream gradient on u
  };

  PredictBackward make_predict_backward() const {
    PredictBackward acc;
    acc.GA = Eigen::MatrixXd::Zero(m(), m());
    acc.GB = Eigen::MatrixXd::Zero(m(), m());
    acc.du = Eigen::VectorXd::Zero(m());
    return acc;
  }

  /// Accumulates one target point; returns d/dkstar (d/dkss equals gvar).
  Eigen::VectorXd predict_backward_point(const Eigen::VectorXd& kstar,
                                         double gmu, double gvar,
                                         PredictBackward& acc) const {
    const Eigen::VectorXd a_s = Lmm_.solve(kstar);
    const Eigen::VectorXd b_s = Lb_.solve(kstar);
    Eigen::VectorXd dks = gmu * w_ - 2.0 * gvar * a_s + 2.0 * gvar * b_s;
    const Eigen::VectorXd gu = gmu * b_s;
    acc.GB -= gu * w_.transpose() + gvar * b_s * b_s.transpose();
    acc.GA -= gvar * kstar * kstar.transpose();
    acc.du += gu;
    return dks;
  }

  /// Folds the staged accumulator into gradients on the kernel blocks.
  MarginalGrads finalize_predict_backward(const PredictBackward& acc) const {
    MarginalGrads out;
    const int N = n();
    out.dKmm = Eigen::MatrixXd::Zero(m(), m());
    out.dKnm = Eigen::MatrixXd::Zero(N, m());
    out.dknn_diag = Eigen::VectorXd::Zero(N);

    Eigen::VectorXd dlambda = Eigen::VectorXd::Zero(N);

    // u = Kmn Lambda^{-1} Omega^{-1} kappa.
    out.dKnm += zl_ * acc.du.transpose();
    const Eigen::VectorXd knm_du = Knm_ * acc.du;
    dlambda.array() -= knm_du.array() * z_.array() /
                       (lambda_.array() * lambda_.array());

    // B = Kmm + Kmn Lambda^{-1} Knm.
    out.dKmm += acc.GB;
    const Eigen::MatrixXd GBsym = acc.GB + acc.GB.transpose();
    out.dKnm += lambda_.cwiseInverse().asDiagonal() * (Knm_ * GBsym);
    const Eigen::MatrixXd S1 = Knm_ * acc.GB;  // N x M
    for (int i = 0; i < N; ++i) {
      dlambda[i] -= S1.row(i).dot(Knm_.row(i)) / (lambda_[i] * lambda_[i]);
    }

    // Lambda = Omega^{-1} + diag(knn - q_diag), with floored coordinates
    // detached.
    Eigen::VectorXd dqdiag = Eigen::VectorXd::Zero(N);
    for (int i = 0; i < N; ++i) {
      if (floored_[i]) continue;
      out.dknn_diag[i] += dlambda[i];
      dqdiag[i] -= dlambda[i];
    }

    // q_diag_i = Knm_i Kmm^{-1} Knm_i'.
    Eigen::MatrixXd GA_total = acc.GA;
    GA_total += Knm_.transpose() * dqdiag.asDiagonal() * Knm_;
    out.dKnm += 2.0 * dqdiag.asDiagonal() *
                Lmm_.solve(Knm_.transpose()).transpose();

    // Kmm^{-1} chain.
    const Eigen::MatrixXd GAA = Lmm_.solve(GA_total.transpose()).transpose();
    out.dKmm -= Lmm_.solve(GAA);
    return out;
  }

 private:
  // C^{-1} v with C = Lambda + Knm Kmm^{-1} Kmn via Woodbury.
  Eigen::VectorXd cinv_apply(const Eigen::VectorXd& v) const {
    const Eigen::VectorXd vl = v.array() / lambda_.array();
    const Eigen::VectorXd t = Lb_.solve(Knm_.transpose() * vl);
    return vl - ((Knm_ * t).array() / lambda_.array()).matrix();
  }

  Eigen::MatrixXd Kmm_;
  Eigen::MatrixXd Knm_;
  Eigen::VectorXd knn_diag_;
  Eigen::VectorXd omega_;
  linalg::Cholesky Lmm_;
  linalg::Cholesky Lb_;
  Eigen::VectorXd qdiag_, dvec_, lambda_, z_, zl_, u_, w_;
  std::vector<bool> floored_;
};

/// Test-time cache: Lambda, the Cholesky of B and the omega sample they
/// were built from. Predictions against it cost O(M^2) per point.
struct FITCCache {
  FitcFactors factors;
  Eigen::VectorXd omega;

  FITCCache(const Eigen::MatrixXd& Kmm, const Eigen::MatrixXd& Knm,
            const Eigen::VectorXd& knn_diag, const Eigen::VectorXi& y,
            const Eigen::VectorXd& om)
      : factors(Kmm, Knm, knn_diag, y, om), omega(om) {}
};

inline FitcFactors::GaussianDiagLowRank fitc_posterior_f(
    const Eigen::MatrixXd& Kmm, const Eigen::MatrixXd& Knm,
    const Eigen::VectorXd& knn_diag, const Eigen::VectorXi& y,
    const Eigen::VectorXd& omega) {
  return FitcFactors(Kmm, Knm, knn_diag, y, omega).posterior_f();
}

inline FitcFactors::GaussianDense fitc_posterior_fbar(
    const Eigen::MatrixXd& Kmm, const Eigen::MatrixXd& Knm,
    const Eigen::VectorXd& knn_diag, const Eigen::VectorXi& y,
    const Eigen::VectorXd& omega) {
  return FitcFactors(Kmm, Knm, knn_diag, y, omega).posterior_fbar();
}

inline NodePosterior::Predictive fitc_predictive(const FITCCache& cache,
                                                 const Eigen::VectorXd& kstar,
                                                 double kss,
                                                 const Eigen::VectorXd& omega) {
  if (omega.size() != cache.omega.size() || omega != cache.omega) {
    throw std::invalid_argument("fitc_predictive: cache is stale for omega");
  }
  return cache.factors.predict(kstar, kss);
}

inline double fitc_marginal_loglik_given_omega(const Eigen::MatrixXd& Kmm,
                                               const Eigen::MatrixXd& Knm,
                                               const Eigen::VectorXd& knn_diag,
                                               const Eigen::VectorXi& y,
                                               const Eigen::VectorXd& omega) {
  return FitcFactors(Kmm, Knm, knn_diag, y, omega).marginal_loglik();
}

/// Blocked Gibbs chains under the sparse conditional; retains (f, omega)
/// pairs exactly like the exact-node run_chains.
inline std::vector<JointSample> fitc_run_chains(
    const Eigen::MatrixXd& Kmm, const Eigen::MatrixXd& Knm,
    const Eigen::VectorXd& knn_diag, const Eigen::VectorXi& y, int n_chains,
    int burn_in, int steps_between_samples, int per_chain, Rng& g) {
  const int n = static_cast<int>(y.size());
  std::vector<JointSample> out;
  out.reserve(static_cast<std::size_t>(n_chains) * per_chain);
  for (int c = 0; c < n_chains; ++c) {
    Eigen::VectorXd omega = Eigen::VectorXd::Constant(n, 0.25);
    Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
    const auto sweep = [&]() {
      const FitcFactors factors(Kmm, Knm, knn_diag, y, omega);
      f = factors.sample_f(g);
      for (int i = 0; i < n; ++i) omega[i] = sample_pg({1.0, f[i]}, g);
    };
    for (int s = 0; s < burn_in; ++s) sweep();
    for (int r = 0; r < per_chain; ++r) {
      for (int s = 0; s < steps_between_samples; ++s) sweep();
      out.push_back({f, omega});
    }
  }
  return out;
}

}  // namespace fedgp
