/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fedgp/fitc_node.hpp"
#include "fedgp/kernel.hpp"
#include "oracles.hpp"

using namespace fedgp;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

namespace {

MatrixXd random_embeddings(int n, int d, Rng& g) {
  MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng::normal(g);
  }
  return m;
}

struct SaturatedCase {
  MatrixXd K;      // jittered self-kernel, used for every block
  VectorXi y;
  VectorXd omega;
  MatrixXd e;
  KernelConfig cfg;
};

SaturatedCase saturated(int n, unsigned seed) {
  SaturatedCase c;
  Rng g(seed);
  c.e = random_embeddings(n, 2, g);
  c.K = gram_self(c.cfg, c.e).materialize();
  c.y.resize(n);
  c.omega.resize(n);
  for (int i = 0; i < n; ++i) {
    c.y[i] = static_cast<int>(g() % 2);
    c.omega[i] = 0.1 + rng::uniform(g);
  }
  if (!NodeData{c.e, c.y}.has_both_labels()) c.y[0] = 1 - c.y[0];
  return c;
}

}  // namespace

TEST_CASE("pseudo-input saturation reproduces the exact node to 1e-8") {
  for (int n : {2, 4, 6}) {
    SaturatedCase c = saturated(n, 100 + n);
    const FitcFactors factors(c.K, c.K, c.K.diagonal(), c.y, c.omega);

    const auto exact = f_conditional(c.K, c.y, c.omega);
    const auto post_f = factors.posterior_f();
    const auto post_fbar = factors.posterior_fbar();

    INFO("n = " << n);
    CHECK((post_f.mean - exact.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((post_f.dense_cov() - exact.cov).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((post_fbar.mean - exact.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((post_fbar.cov - exact.cov).cwiseAbs().maxCoeff() < 1e-8);

    CHECK(factors.marginal_loglik() ==
          Catch::Approx(marginal_loglik_given_omega(c.K, c.y, c.omega))
              .margin(1e-8));

    Rng g(7);
    const MatrixXd xs = random_embeddings(1, 2, g);
    const VectorXd kstar = gram(c.cfg, c.e, xs);
    const auto pf = factors.predict(kstar, c.cfg.output_scale);
    const auto pe = predictive_posterior(c.K, c.y, c.omega, kstar,
                                         c.cfg.output_scale);
    CHECK(pf.mu == Catch::Approx(pe.mu).margin(1e-8));
    CHECK(pf.var == Catch::Approx(pe.var).margin(1e-8));
  }
}

TEST_CASE("no data reduces the pseudo posterior to the prior") {
  Rng g(9);
  const KernelConfig cfg;
  const MatrixXd xbar = random_embeddings(3, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const FitcFactors factors(Kmm, MatrixXd(0, 3), VectorXd(0), VectorXi(0),
                            VectorXd(0));
  const auto post = factors.posterior_fbar();
  CHECK(post.mean.cwiseAbs().maxCoeff() == 0.0);
  CHECK((post.cov - Kmm).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("posterior mean is antisymmetric in the routing labels") {
  Rng g(10);
  const KernelConfig cfg;
  const MatrixXd e = random_embeddings(5, 2, g);
  const MatrixXd xbar = random_embeddings(2, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const MatrixXd Knm = gram(cfg, e, xbar);
  const VectorXd knn = VectorXd::Constant(5, cfg.output_scale);
  VectorXi y(5), yf(5);
  y << 1, 0, 1, 1, 0;
  for (int i = 0; i < 5; ++i) yf[i] = 1 - y[i];
  VectorXd omega(5);
  omega << 0.3, 0.4, 0.2, 0.5, 0.35;

  const auto a = fitc_posterior_f(Kmm, Knm, knn, y, omega);
  const auto b = fitc_posterior_f(Kmm, Knm, knn, yf, omega);
  // mean is linear in kappa, so kappa = 0 would give exactly zero
  CHECK((a.mean + b.mean).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("dense linear-algebra oracle confirms mean and marginal") {
  Rng g(11);
  const KernelConfig cfg;
  const int n = 6, m = 2;
  const MatrixXd e = random_embeddings(n, 2, g);
  const MatrixXd xbar = random_embeddings(m, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const MatrixXd Knm = gram(cfg, e, xbar);
  const VectorXd knn = VectorXd::Constant(n, cfg.output_scale);
  VectorXi y(n);
  y << 1, 0, 1, 1, 0, 0;
  VectorXd omega(n);
  for (int i = 0; i < n; ++i) omega[i] = 0.2 + 0.1 * i;

  // dense reference, all inverses explicit
  const MatrixXd A = Kmm.inverse();
  const MatrixXd Q = Knm * A * Knm.transpose();
  VectorXd lambda(n);
  for (int i = 0; i < n; ++i) lambda[i] = 1.0 / omega[i] + knn[i] - Q(i, i);
  const MatrixXd B =
      Kmm + Knm.transpose() * lambda.cwiseInverse().asDiagonal() * Knm;
  const VectorXd z = kappa_of(y).array() / omega.array();
  const VectorXd mean_dense = Knm * B.inverse() * Knm.transpose() *
                              lambda.cwiseInverse().asDiagonal() * z;
  MatrixXd Cdense = Q;
  Cdense.diagonal() += lambda;
  const double marginal_dense =
      -0.5 * z.dot(Cdense.inverse() * z) -
      0.5 * std::log(Cdense.determinant()) - 0.5 * n * std::log(2.0 * M_PI);

  const FitcFactors factors(Kmm, Knm, knn, y, omega);
  CHECK((factors.posterior_f().mean - mean_dense).cwiseAbs().maxCoeff() <
        1e-8);
  CHECK(factors.marginal_loglik() == Catch::Approx(marginal_dense).margin(1e-8));

  SECTION("large omega variant") {
    VectorXd om_big = VectorXd::Constant(n, 1e4);
    VectorXd lam2(n);
    for (int i = 0; i < n; ++i) lam2[i] = 1e-4 + knn[i] - Q(i, i);
    const MatrixXd B2 =
        Kmm + Knm.transpose() * lam2.cwiseInverse().asDiagonal() * Knm;
    const VectorXd z2 = kappa_of(y).array() / om_big.array();
    const VectorXd want = Knm * B2.inverse() * Knm.transpose() *
                          lam2.cwiseInverse().asDiagonal() * z2;
    const auto got = fitc_posterior_f(Kmm, Knm, knn, y, om_big);
    CHECK((got.mean - want).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("scalar case agrees with hand arithmetic") {
  MatrixXd Kmm(1, 1), Knm(1, 1);
  Kmm << 2.0;
  Knm << 1.2;
  VectorXd knn(1);
  knn << 2.5;
  VectorXi y(1);
  y << 1;
  VectorXd omega(1);
  omega << 0.7;

  const double lambda = 1.0 / 0.7 + 2.5 - 1.2 * 1.2 / 2.0;
  const double cval = lambda + 1.2 * 1.2 / 2.0;
  const double z = 0.5 / 0.7;
  const double want = -0.5 * z * z / cval - 0.5 * std::log(cval) -
                      0.5 * std::log(2.0 * M_PI);
  CHECK(fitc_marginal_loglik_given_omega(Kmm, Knm, knn, y, omega) ==
        Catch::Approx(want).margin(1e-12));
}

TEST_CASE("pseudo posterior covariance is SPD across random instances") {
  Rng g(12);
  const KernelConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(g() % 6);
    const int m = 1 + static_cast<int>(g() % 3);
    const MatrixXd e = random_embeddings(n, 2, g);
    const MatrixXd xbar = random_embeddings(m, 2, g);
    const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
    const MatrixXd Knm = gram(cfg, e, xbar);
    const VectorXd knn = VectorXd::Constant(n, cfg.output_scale);
    VectorXi y(n);
    for (int i = 0; i < n; ++i) y[i] = static_cast<int>(g() % 2);
    VectorXd omega(n);
    for (int i = 0; i < n; ++i) omega[i] = 0.05 + rng::uniform(g);

    const auto post = fitc_posterior_fbar(Kmm, Knm, knn, y, omega);
    Eigen::LLT<MatrixXd> llt(post.cov);
    REQUIRE(llt.info() == Eigen::Success);
  }
}

TEST_CASE("predictive contraction and prior recovery") {
  Rng g(13);
  const KernelConfig cfg;
  const MatrixXd e = random_embeddings(5, 2, g);
  const MatrixXd xbar = random_embeddings(3, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const MatrixXd Knm = gram(cfg, e, xbar);
  const VectorXd knn = VectorXd::Constant(5, cfg.output_scale);
  VectorXi y(5);
  y << 1, 0, 0, 1, 1;
  VectorXd omega(5);
  omega << 0.3, 0.2, 0.4, 0.6, 0.25;
  const FitcFactors factors(Kmm, Knm, knn, y, omega);

  const auto prior = factors.predict(VectorXd::Zero(3), cfg.output_scale);
  CHECK(prior.mu == 0.0);
  CHECK(prior.var == Catch::Approx(cfg.output_scale).margin(1e-12));

  for (int trial = 0; trial < 100; ++trial) {
    const MatrixXd xs = random_embeddings(1, 2, g);
    const VectorXd kstar = gram(cfg, xbar, xs);
    const auto p = factors.predict(kstar, cfg.output_scale);
    REQUIRE(p.var <= cfg.output_scale + 1e-10);
  }
}

TEST_CASE("stale cache is rejected") {
  Rng g(14);
  const KernelConfig cfg;
  const MatrixXd e = random_embeddings(3, 2, g);
  const MatrixXd xbar = random_embeddings(2, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const MatrixXd Knm = gram(cfg, e, xbar);
  const VectorXd knn = VectorXd::Constant(3, cfg.output_scale);
  VectorXi y(3);
  y << 1, 0, 1;
  VectorXd omega(3);
  omega << 0.3, 0.4, 0.5;
  const FITCCache cache(Kmm, Knm, knn, y, omega);
  VectorXd other = omega;
  other[0] += 0.1;
  CHECK_THROWS_AS(
      fitc_predictive(cache, VectorXd::Zero(2), cfg.output_scale, other),
      std::invalid_argument);
  CHECK_NOTHROW(
      fitc_predictive(cache, VectorXd::Zero(2), cfg.output_scale, omega));
}

TEST_CASE("sparse paths never factorize an N-by-N matrix") {
  Rng g(15);
  const KernelConfig cfg;
  const int n = 30, m = 3;
  const MatrixXd e = random_embeddings(n, 2, g);
  const MatrixXd xbar = random_embeddings(m, 2, g);
  const MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  const MatrixXd Knm = gram(cfg, e, xbar);
  const VectorXd knn = VectorXd::Constant(n, cfg.output_scale);
  VectorXi y(n);
  for (int i = 0; i < n; ++i) y[i] = i % 2;
  VectorXd omega(n);
  for (int i = 0; i < n; ++i) omega[i] = 0.1 + 0.01 * i;

  linalg::reset_cholesky_stats();
  const FitcFactors factors(Kmm, Knm, knn, y, omega);
  factors.posterior_f();
  factors.posterior_fbar();
  factors.marginal_loglik();
  factors.marginal_grads();
  Rng gs(16);
  factors.sample_f(gs);
  factors.predict(gram(cfg, xbar, random_embeddings(1, 2, g)),
                  cfg.output_scale);
  fitc_run_chains(Kmm, Knm, knn, y, 3, 3, 2, 2, gs);
  const auto stats = linalg::cholesky_stats();
  CHECK(stats.max_dim <= m);
  CHECK(stats.count > 0);
}

TEST_CASE("fitc gibbs reproduces exact posterior moments at saturation") {
  const KernelConfig cfg{1.0, 2.0};
  MatrixXd e(2, 1);
  e << 0.2, 1.0;
  const MatrixXd K = gram_self(cfg, e).materialize();
  VectorXi y(2);
  y << 1, 0;

  Rng g(17);
  const int chains = 20, per_chain = 500;
  const auto samples =
      fitc_run_chains(K, K, K.diagonal(), y, chains, 20, 5, per_chain, g);
  const auto oracle = oracles::exact_posterior_quadrature(
      K, y, VectorXd::Zero(2), cfg.output_scale, 401, 8.0);
  for (int coord = 0; coord < 2; ++coord) {
    std::vector<double> means(chains, 0.0);
    for (int c = 0; c < chains; ++c) {
      for (int r = 0; r < per_chain; ++r) {
        means[c] += samples[c * per_chain + r].f[coord];
      }
      means[c] /= per_chain;
    }
    const auto st = oracles::chain_stats(means);
    CHECK(std::abs(st.mean - oracle.mean_f[coord]) < 3.0 * st.stderr_ + 2e-3);
  }
}

TEST_CASE("marginal gradients match finite differences") {
  Rng g(18);
  const KernelConfig cfg;
  const int n = 6, m = 3;
  const MatrixXd e = random_embeddings(n, 2, g);
  const MatrixXd xbar = random_embeddings(m, 2, g);
  MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  MatrixXd Knm = gram(cfg, e, xbar);
  VectorXd knn = VectorXd::Constant(n, cfg.output_scale);
  VectorXi y(n);
  y << 1, 0, 1, 0, 0, 1;
  VectorXd omega(n);
  for (int i = 0; i < n; ++i) omega[i] = 0.15 + 0.07 * i;

  const auto grads = FitcFactors(Kmm, Knm, knn, y, omega).marginal_grads();
  const auto value = [&](const MatrixXd& Km, const MatrixXd& Kn,
                         const VectorXd& kd) {
    return fitc_marginal_loglik_given_omega(Km, Kn, kd, y, omega);
  };

  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      const double fd = oracles::central_diff(
          [&](double v) {
            MatrixXd Km = Kmm;
            const double d = v - Kmm(i, j);
            Km(i, j) += d;
            if (i != j) Km(j, i) += d;
            return value(Km, Knm, knn);
          },
          Kmm(i, j));
      const double ana =
          i == j ? grads.dKmm(i, i) : grads.dKmm(i, j) + grads.dKmm(j, i);
      REQUIRE(oracles::rel_err(ana, fd) < 1e-4);
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const double fd = oracles::central_diff(
          [&](double v) {
            MatrixXd Kn = Knm;
            Kn(i, j) = v;
            return value(Kmm, Kn, knn);
          },
          Knm(i, j));
      REQUIRE(oracles::rel_err(grads.dKnm(i, j), fd) < 1e-4);
    }
    const double fd = oracles::central_diff(
        [&](double v) {
          VectorXd kd = knn;
          kd[i] = v;
          return value(Kmm, Knm, kd);
        },
        knn[i]);
    REQUIRE(oracles::rel_err(grads.dknn_diag[i], fd) < 1e-4);
  }
}

TEST_CASE("predictive backward matches finite differences") {
  Rng g(19);
  const KernelConfig cfg;
  const int n = 5, m = 3;
  const MatrixXd e = random_embeddings(n, 2, g);
  const MatrixXd xbar = random_embeddings(m, 2, g);
  MatrixXd Kmm = gram_self(cfg, xbar).materialize();
  MatrixXd Knm = gram(cfg, e, xbar);
  VectorXd knn = VectorXd::Constant(n, cfg.output_scale);
  VectorXi y(n);
  y << 1, 0, 1, 1, 0;
  VectorXd omega(n);
  for (int i = 0; i < n; ++i) omega[i] = 0.2 + 0.1 * i;

  std::vector<VectorXd> kstars;
  std::vector<double> gmus = {0.9, -0.3};
  std::vector<double> gvars = {0.4, 0.7};
  for (int t = 0; t < 2; ++t) {
    kstars.push_back(gram(cfg, xbar, random_embeddings(1, 2, g)));
  }

  const auto value = [&](const MatrixXd& Km, const MatrixXd& Kn,
                         const VectorXd& kd,
                         const std::vector<VectorXd>& kss) {
    const FitcFactors f(Km, Kn, kd, y, omega);
    double acc = 0.0;
    for (int t = 0; t < 2; ++t) {
      const auto p = f.predict(kss[t], cfg.output_scale);
      acc += gmus[t] * p.mu + gvars[t] * p.var;
    }
    return acc;
  };

  const FitcFactors factors(Kmm, Knm, knn, y, omega);
  auto acc = factors.make_predict_backward();
  std::vector<VectorXd> dkstars;
  for (int t = 0; t < 2; ++t) {
    dkstars.push_back(
        factors.predict_backward_point(kstars[t], gmus[t], gvars[t], acc));
  }
  const auto grads = factors.finalize_predict_backward(acc);

  for (int t = 0; t < 2; ++t) {
    for (int j = 0; j < m; ++j) {
      const double fd = oracles::central_diff(
          [&](double v) {
            auto ks = kstars;
            ks[t][j] = v;
            return value(Kmm, Knm, knn, ks);
          },
          kstars[t][j]);
      REQUIRE(oracles::rel_err(dkstars[t][j], fd) < 1e-4);
    }
  }
  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      const double fd = oracles::central_diff(
          [&](double v) {
            MatrixXd Km = Kmm;
            const double d = v - Kmm(i, j);
            Km(i, j) += d;
            if (i != j) Km(j, i) += d;
            return value(Km, Knm, knn, kstars);
          },
          Kmm(i, j));
      const double ana =
          i == j ? grads.dKmm(i, i) : grads.dKmm(i, j) + grads.dKmm(j, i);
      REQUIRE(oracles::rel_err(ana, fd) < 1e-4);
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const double fd = oracles::central_diff(
          [&](double v) {
            MatrixXd Kn = Knm;
            Kn(i, j) = v;
            return value(Kmm, Kn, knn, kstars);
          },
          Knm(i, j));
      REQUIRE(oracles::rel_err(grads.dKnm(i, j), fd) < 1e-4);
    }
    const double fd = oracles::central_diff(
        [&](double v) {
          VectorXd kd = knn;
          kd[i] = v;
          return value(Kmm, Knm, kd, kstars);
        },
        knn[i]);
    REQUIRE(oracles::rel_err(grads.dknn_diag[i], fd) < 1e-4);
  }
}
