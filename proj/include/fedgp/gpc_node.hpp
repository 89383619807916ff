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

#include "fedgp/gauss_hermite.hpp"
#include "fedgp/gaussian.hpp"
#include "fedgp/kernel.hpp"
#include "fedgp/linalg.hpp"
#include "fedgp/polya_gamma.hpp"
#include "fedgp/rng.hpp"

namespace fedgp {

/// Inputs routed to one tree node with their binary routing labels
/// (1 = the class path goes left here). X lives in embedding space.
struct NodeData {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;

  int n() const { return static_cast<int>(y.size()); }
  bool has_both_labels() const {
    if (y.size() == 0) return false;
    const int first = y[0];
    for (Eigen::Index i = 1; i < y.size(); ++i) {
      if (y[i] != first) return true;
    }
    return false;
  }
};

inline Eigen::VectorXd kappa_of(const Eigen::VectorXi& y) {
  return y.cast<double>().array() - 0.5;
}

struct GibbsConfig {
  int train_chains = 20;
  int test_chains = 30;
  int steps_between_samples = 5;
  int burn_in = 5;
  int gh_degree = 20;

  void validate() const {
    if (train_chains < 1 || test_chains < 1 || steps_between_samples < 1 ||
        burn_in < 1 || gh_degree < 1) {
      throw std::invalid_argument("GibbsConfig fields must all be >= 1");
    }
  }
};

/// One chain of the blocked sampler over (f, omega).
struct ChainState {
  Eigen::VectorXd f;
  Eigen::VectorXd omega;
};

struct GibbsState {
  std::vector<ChainState> chains;
  int steps_between_samples = 5;
};

/// All chains start from f = 0 and omega = E[PG(1, 0)] = 1/4.
inline GibbsState init_gibbs_state(int n_points, int n_chains,
                                   int steps_between_samples) {
  GibbsState s;
  s.steps_between_samples = steps_between_samples;
  s.chains.resize(n_chains);
  for (auto& c : s.chains) {
    c.f = Eigen::VectorXd::Zero(n_points);
    c.omega = Eigen::VectorXd::Constant(n_points, 0.25);
  }
  return s;
}

struct FConditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Moments of f | omega, y under the zero-mean prior N(0, K). Computed
/// through C = K + Omega^{-1} so K is never inverted explicitly:
///   mean = K C^{-1} Omega^{-1} kappa,  cov = K - K C^{-1} K.
inline FConditional f_conditional(const Eigen::MatrixXd& K,
                                  const Eigen::VectorXi& y,
                                  const Eigen::VectorXd& omega) {
  if ((omega.array() <= 0.0).any()) {
    throw std::invalid_argument("omega must be strictly positive");
  }
  const Eigen::VectorXd z = kappa_of(y).array() / omega.array();
  Eigen::MatrixXd C = K;
  C.diagonal() += omega.cwiseInverse();
  const linalg::Cholesky chol = linalg::factorize(C);
  FConditional out;
  out.mean = K * chol.solve(z);
  out.cov = K - K * chol.solve(K);
  return out;
}

/// One blocked sweep: draw f from its Gaussian conditional by prior
/// perturbation (uses a cached Cholesky of the prior), then refresh
/// omega_j ~ PG(1, f_j).
inline void gibbs_sweep(const Eigen::MatrixXd& K,
                        const linalg::Cholesky& prior_chol,
                        const Eigen::VectorXi& y, ChainState& chain, Rng& g) {
  const int n = static_cast<int>(y.size());
  const Eigen::VectorXd z = kappa_of(y).array() / chain.omega.array();
  Eigen::MatrixXd C = K;
  C.diagonal() += chain.omega.cwiseInverse();
  const linalg::Cholesky chol = linalg::factorize(C);

  Eigen::VectorXd zeta(n), eps(n);
  for (int i = 0; i < n; ++i) zeta[i] = rng::normal(g);
  const Eigen::VectorXd prior_draw = prior_chol.lower_times(zeta);
  for (int i = 0; i < n; ++i) {
    eps[i] = rng::normal(g) / std::sqrt(chain.omega[i]);
  }
  chain.f = prior_draw + K * chol.solve(z - prior_draw - eps);
  for (int i = 0; i < n; ++i) {
    chain.omega[i] = sample_pg({1.0, chain.f[i]}, g);
  }
}

/// Advances every chain by one blocked sweep against the given Gram matrix.
inline GibbsState gibbs_step(const NodeData& data, const GramMatrix& gram,
                             const GibbsState& state, Rng& g) {
  if (gram.n() != data.n()) {
    throw std::invalid_argument("gibbs_step: gram size does not match data");
  }
  const Eigen::MatrixXd K = gram.materialize();
  const linalg::Cholesky prior_chol =
      linalg::factorize(K, 0.0, gram.max_jitter);
  GibbsState out = state;
  for (auto& chain : out.chains) {
    gibbs_sweep(K, prior_chol, data.y, chain, g);
  }
  return out;
}

struct JointSample {
  Eigen::VectorXd f;
  Eigen::VectorXd omega;
};

/// Burn-in, then retain `per_chain` (f, omega) pairs per chain, with the
/// configured thinning between retained samples.
inline std::vector<JointSample> run_chains(const Eigen::MatrixXd& K,
                                           const Eigen::VectorXi& y,
                                           int n_chains, int burn_in,
                                           int steps_between_samples,
                                           int per_chain, Rng& g) {
  const linalg::Cholesky prior_chol = linalg::factorize(K);
  std::vector<JointSample> out;
  out.reserve(static_cast<std::size_t>(n_chains) * per_chain);
  for (int c = 0; c < n_chains; ++c) {
    ChainState chain;
    chain.f = Eigen::VectorXd::Zero(y.size());
    chain.omega = Eigen::VectorXd::Constant(y.size(), 0.25);
    for (int s = 0; s < burn_in; ++s) gibbs_sweep(K, prior_chol, y, chain, g);
    for (int r = 0; r < per_chain; ++r) {
      for (int s = 0; s < steps_between_samples; ++s) {
        gibbs_sweep(K, prior_chol, y, chain, g);
      }
      out.push_back({chain.f, chain.omega});
    }
  }
  return out;
}

/// Shared factorization of C = K + Omega^{-1}; serves the given-omega
/// marginal, the predictive posterior and their gradients.
class NodePosterior {
 public:
  NodePosterior(const Eigen::MatrixXd& K, const Eigen::VectorXi& y,
                const Eigen::VectorXd& omega)
      : n_(static_cast<int>(y.size())), omega_(omega) {
    if ((omega.array() <= 0.0).any()) {
      throw std::invalid_argument("omega must be strictly positive");
    }
    Eigen::MatrixXd C = K;
    C.diagonal() += omega.cwiseInverse();
    chol_ = linalg::factorize(C);
    z_ = kappa_of(y).array() / omega.array();
    alpha_ = chol_.solve(z_);
  }

  /// log N(Omega^{-1} kappa | 0, K + Omega^{-1}).
  double marginal_loglik() const {
    return -0.5 * z_.dot(alpha_) - 0.5 * chol_.log_det() -
           0.5 * n_ * kLog2Pi;
  }

  /// Entrywise gradient of marginal_loglik in K.
  Eigen::MatrixXd marginal_loglik_grad_K() const {
    return 0.5 * (alpha_ * alpha_.transpose() - chol_.inverse());
  }

  struct Predictive {
    double mu = 0.0;
    double var = 0.0;
  };

  /// mu* = kstar' C^{-1} Omega^{-1} kappa, var* = kss - kstar' C^{-1} kstar.
  Predictive predict(const Eigen::VectorXd& kstar, double kss) const {
    Predictive p;
    const Eigen::VectorXd beta = chol_.solve(kstar);
    p.mu = kstar.dot(alpha_);
    p.var = kss - kstar.dot(beta);
    if (p.var < 1e-12) p.var = 1e-12;
    return p;
  }

  /// Reverse mode of predict(): accumulates into dK and dkstar given
  /// upstream gradients on (mu, var); returns d/dkss.
  double predict_backward(const Eigen::VectorXd& kstar, double gmu,
                          double gvar, Eigen::MatrixXd& dK,
                          Eigen::VectorXd& dkstar) const {
    const Eigen::VectorXd beta = chol_.solve(kstar);
    dkstar += gmu * alpha_ - 2.0 * gvar * beta;
    dK += gvar * beta * beta.transpose() -
          gmu * beta * alpha_.transpose();
    return gvar;
  }

  const Eigen::VectorXd& alpha() const { return alpha_; }
  const linalg::Cholesky& chol() const { return chol_; }
  const Eigen::VectorXd& pseudo_obs() const { return z_; }

 private:
  int n_;
  Eigen::VectorXd omega_;
  linalg::Cholesky chol_;
  Eigen::VectorXd z_;
  Eigen::VectorXd alpha_;
};

inline double marginal_loglik_given_omega(const Eigen::MatrixXd& K,
                                          const Eigen::VectorXi& y,
                                          const Eigen::VectorXd& omega) {
  return NodePosterior(K, y, omega).marginal_loglik();
}

inline double marginal_loglik_given_omega(const NodeData& data,
                                          const GramMatrix& gram,
                                          const Eigen::VectorXd& omega) {
  return marginal_loglik_given_omega(gram.materialize(), data.y, omega);
}

inline NodePosterior::Predictive predictive_posterior(
    const Eigen::MatrixXd& K, const Eigen::VectorXi& y,
    const Eigen::VectorXd& omega, const Eigen::VectorXd& kstar, double kss) {
  return NodePosterior(K, y, omega).predict(kstar, kss);
}

/// KL( N(m, Sigma) || N(0, K) ) of the f | omega conditional against the
/// prior, in the C = K + Omega^{-1} parameterization:
///   KL = 1/2 [ log|C| + sum log omega - tr(C^{-1} K) + m' alpha ].
/// The kappa overload exists so synthetic injections (kappa = 0 forces the
/// conditional onto the prior) are expressible.
inline double conditional_prior_kl(const Eigen::MatrixXd& K,
                                   const Eigen::VectorXd& kappa,
                                   const Eigen::VectorXd& omega) {
  Eigen::MatrixXd C = K;
  C.diagonal() += omega.cwiseInverse();
  const linalg::Cholesky chol = linalg::factorize(C);
  const Eigen::VectorXd z = kappa.array() / omega.array();
  const Eigen::VectorXd alpha = chol.solve(z);
  const Eigen::MatrixXd CinvK = chol.solve(K);
  const Eigen::VectorXd m = K * alpha;
  return 0.5 * (chol.log_det() + omega.array().log().sum() - CinvK.trace() +
                m.dot(alpha));
}

inline double conditional_prior_kl(const Eigen::MatrixXd& K,
                                   const Eigen::VectorXi& y,
                                   const Eigen::VectorXd& omega) {
  return conditional_prior_kl(K, Eigen::VectorXd(kappa_of(y)), omega);
}

}  // namespace fedgp
