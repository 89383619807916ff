/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "fedgp/gaussian.hpp"
#include "fedgp/kernel.hpp"
#include "fedgp/rng.hpp"
#include "oracles.hpp"

using namespace fedgp;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {
MatrixXd random_matrix(int r, int c, Rng& g) {
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = rng::normal(g);
  }
  return m;
}
}  // namespace

TEST_CASE("gram defaults and plug-in values") {
  const KernelConfig cfg;  // length 1, output scale 8
  MatrixXd a(1, 2);
  a << 0.3, -0.4;

  SECTION("single point gives the output scale") {
    const MatrixXd k = gram(cfg, a, a);
    REQUIRE(k.rows() == 1);
    CHECK(k(0, 0) == Catch::Approx(8.0).margin(1e-14));
  }
  SECTION("identical rows match the diagonal") {
    MatrixXd b(2, 2);
    b << 0.3, -0.4, 0.3, -0.4;
    const MatrixXd k = gram(cfg, b, b);
    CHECK(k(0, 1) == Catch::Approx(k(0, 0)).margin(1e-14));
  }
  SECTION("distance length_scale * sqrt(2) decays by e^{-1}") {
    MatrixXd b(1, 2);
    b << 0.3 + std::sqrt(2.0), -0.4;
    const MatrixXd k = gram(cfg, a, b);
    CHECK(k(0, 0) == Catch::Approx(8.0 * std::exp(-1.0)).epsilon(1e-12));
  }
}

TEST_CASE("gram symmetry and positive definiteness with jitter") {
  const KernelConfig cfg;
  Rng g(5);
  for (int trial = 0; trial < 20; ++trial) {
    MatrixXd a = random_matrix(6, 3, g);
    if (trial % 3 == 0) a.row(5) = a.row(0);  // duplicates stress the jitter
    MatrixXd b = random_matrix(4, 3, g);
    const MatrixXd kab = gram(cfg, a, b);
    const MatrixXd kba = gram(cfg, b, a);
    CHECK((kab - kba.transpose()).cwiseAbs().maxCoeff() == 0.0);

    const GramMatrix self = gram_self(cfg, a);
    CHECK_NOTHROW(self.factorize());
  }
}

TEST_CASE("strict factorization fails without jitter allowance") {
  MatrixXd bad(2, 2);
  bad << 1.0, 1.0, 1.0, 1.0;  // singular
  CHECK_THROWS_AS(linalg::factorize(bad), FactorizationError);
  CHECK_NOTHROW(linalg::factorize(bad, 1e-6, 1e-2));
}

TEST_CASE("cholesky instrumentation records dimensions") {
  linalg::reset_cholesky_stats();
  Rng g(9);
  const MatrixXd a = random_matrix(5, 2, g);
  gram_self(KernelConfig{}, a).factorize();
  const auto stats = linalg::cholesky_stats();
  CHECK(stats.count == 1);
  CHECK(stats.max_dim == 5);
}

TEST_CASE("gram_backward matches central finite differences") {
  const KernelConfig cfg{0.8, 2.5};
  Rng g(31);
  MatrixXd a = random_matrix(4, 3, g);
  MatrixXd b = random_matrix(3, 3, g);
  const MatrixXd upstream = random_matrix(4, 3, g);

  const MatrixXd k = gram(cfg, a, b);
  MatrixXd da = MatrixXd::Zero(4, 3), db = MatrixXd::Zero(3, 3);
  gram_backward(cfg, a, b, k, upstream, da, db);

  const auto objective = [&](const MatrixXd& aa, const MatrixXd& bb) {
    return (upstream.array() * gram(cfg, aa, bb).array()).sum();
  };
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double fd = oracles::central_diff(
          [&](double x) {
            MatrixXd aa = a;
            aa(i, j) = x;
            return objective(aa, b);
          },
          a(i, j));
      REQUIRE(oracles::rel_err(da(i, j), fd) < 1e-6);
    }
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double fd = oracles::central_diff(
          [&](double x) {
            MatrixXd bb = b;
            bb(i, j) = x;
            return objective(a, bb);
          },
          b(i, j));
      REQUIRE(oracles::rel_err(db(i, j), fd) < 1e-6);
    }
  }
}

TEST_CASE("gram_self_backward accounts for both index roles") {
  const KernelConfig cfg{1.3, 4.0};
  Rng g(32);
  MatrixXd a = random_matrix(5, 2, g);
  const MatrixXd upstream = random_matrix(5, 5, g);
  const MatrixXd k = gram(cfg, a, a);
  const MatrixXd da = gram_self_backward(cfg, a, k, upstream);

  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double fd = oracles::central_diff(
          [&](double x) {
            MatrixXd aa = a;
            aa(i, j) = x;
            return (upstream.array() * gram(cfg, aa, aa).array()).sum();
          },
          a(i, j));
      REQUIRE(oracles::rel_err(da(i, j), fd) < 1e-6);
    }
  }
}

TEST_CASE("gaussian logdensity value and gradients") {
  SECTION("standard normal at zero") {
    VectorXd mean = VectorXd::Zero(1), obs = VectorXd::Zero(1);
    MatrixXd cov = MatrixXd::Identity(1, 1);
    const auto r = gaussian_logdensity_grad(mean, cov, obs);
    CHECK(r.logdensity == Catch::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-14));
  }

  SECTION("covariance gradient vs finite differences on a random SPD 4x4") {
    Rng g(71);
    const MatrixXd base = random_matrix(4, 4, g);
    MatrixXd cov = base * base.transpose() + 4.0 * MatrixXd::Identity(4, 4);
    VectorXd mean = random_matrix(4, 1, g);
    VectorXd obs = random_matrix(4, 1, g);
    const auto r = gaussian_logdensity_grad(mean, cov, obs);
    for (int i = 0; i < 4; ++i) {
      for (int j = i; j < 4; ++j) {
        // symmetric perturbation against the sum of both entry gradients
        const double fd = oracles::central_diff(
            [&](double x) {
              MatrixXd c = cov;
              const double d = x - cov(i, j);
              c(i, j) += d;
              if (i != j) c(j, i) += d;
              return gaussian_logdensity(mean, c, obs);
            },
            cov(i, j));
        const double ana = i == j ? r.grad_cov(i, i)
                                  : r.grad_cov(i, j) + r.grad_cov(j, i);
        REQUIRE(std::abs(ana - fd) < 1e-5);
      }
    }
  }

  SECTION("mean gradient equals cov^{-1}(obs - mean)") {
    Rng g(72);
    const MatrixXd base = random_matrix(3, 3, g);
    MatrixXd cov = base * base.transpose() + 2.0 * MatrixXd::Identity(3, 3);
    VectorXd mean = random_matrix(3, 1, g);
    VectorXd obs = random_matrix(3, 1, g);
    const auto r = gaussian_logdensity_grad(mean, cov, obs);
    const VectorXd want = cov.inverse() * (obs - mean);
    CHECK((r.grad_mean - want).cwiseAbs().maxCoeff() < 1e-10);
    for (int i = 0; i < 3; ++i) {
      const double fd = oracles::central_diff(
          [&](double x) {
            VectorXd m = mean;
            m[i] = x;
            return gaussian_logdensity(m, cov, obs);
          },
          mean[i]);
      REQUIRE(std::abs(r.grad_mean[i] - fd) < 1e-5);
    }
  }
}
