/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "fedgp/bound.hpp"
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
}  // namespace

TEST_CASE("inverse binary KL") {
  SECTION("zero budget returns q") {
    CHECK(kl_inverse_ber(0.3, 0.0) == 0.3);
    CHECK(kl_inverse_ber(0.0, 0.0) == 0.0);
  }
  SECTION("q = 0 solves -log(1-p) = eps") {
    for (double eps : {0.05, 0.3, 1.0}) {
      CHECK(kl_inverse_ber(0.0, eps) ==
            Catch::Approx(1.0 - std::exp(-eps)).margin(1e-9));
    }
  }
  SECTION("bisection matches a dense grid argmax") {
    const double q = 0.1, eps = 0.05;
    double best = q;
    for (long k = 0; k <= 1000000; ++k) {
      const double p = static_cast<double>(k) / 1000000.0;
      if (p >= q && binary_kl(q, p) <= eps) best = std::max(best, p);
    }
    CHECK(kl_inverse_ber(q, eps) == Catch::Approx(best).margin(1e-5));
  }
  SECTION("monotone nondecreasing in both arguments") {
    Rng g(3);
    for (int t = 0; t < 200; ++t) {
      const double q = rng::uniform(g);
      const double e = 2.0 * rng::uniform(g);
      const double dq = 0.2 * rng::uniform(g);
      const double de = 0.5 * rng::uniform(g);
      REQUIRE(kl_inverse_ber(std::min(1.0, q + dq), e) >=
              kl_inverse_ber(q, e) - 1e-9);
      REQUIRE(kl_inverse_ber(q, e + de) >= kl_inverse_ber(q, e) - 1e-9);
    }
  }
}

TEST_CASE("gibbs empirical risk limits") {
  MatrixXd K(2, 2);
  K << 2.0, 0.3, 0.3, 2.0;
  VectorXi y(2);
  y << 1, 0;

  SECTION("posterior state pinned at y * 1e6 gives zero risk") {
    std::vector<JointSample> samples;
    for (int k = 0; k < 5; ++k) {
      JointSample js;
      js.f = VectorXd(2);
      js.f << 1e6, -1e6;  // sign matches the +-1 mapping of y = (1, 0)
      js.omega = VectorXd::Constant(2, 0.25);
      samples.push_back(js);
    }
    Rng g(4);
    const double r = gibbs_empirical_risk(K, y, samples, 5, g);
    CHECK(r == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("sign-symmetric posterior samples give exactly one half") {
    // a sample set closed under negation is the kappa = 0 symmetric case:
    // each (f, -f) pair errs on exactly one member per point
    Rng g(5);
    std::vector<JointSample> samples;
    for (int k = 0; k < 25; ++k) {
      JointSample js;
      js.f = VectorXd(2);
      js.f << rng::normal(g), rng::normal(g);
      js.omega = VectorXd::Constant(2, 0.25);
      samples.push_back(js);
      JointSample neg = js;
      neg.f = -js.f;
      samples.push_back(neg);
    }
    Rng gr(6);
    const double r = gibbs_empirical_risk(K, y, samples, 50, gr);
    CHECK(r == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("two-point toy agrees with the quadrature oracle") {
    const KernelConfig cfg{1.0, 2.0};
    MatrixXd e(2, 1);
    e << 0.2, 0.9;
    const MatrixXd Kq = gram_self(cfg, e).materialize();
    Rng g(6);
    const auto samples = run_chains(Kq, y, 20, 20, 5, 250, g);
    const double risk = gibbs_empirical_risk(Kq, y, samples, 20000, g);

    // oracle: P(sign f != y) via the dense posterior grid
    const auto oracle = oracles::exact_posterior_quadrature(
        Kq, y, VectorXd::Zero(2), cfg.output_scale, 401, 8.0);
    // mean_sigmoid is E[p(f > 0)] under a logistic view, not the sign
    // probability; recompute the sign probability directly
    const MatrixXd Kinv = Kq.inverse();
    const int pts = 401;
    const double span = 8.0, h = 2 * span / (pts - 1);
    const auto w = oracles::simpson_weights(pts, h);
    double mass = 0.0, err = 0.0;
    for (int i = 0; i < pts; ++i) {
      for (int j = 0; j < pts; ++j) {
        Eigen::Vector2d f(-span + i * h, -span + j * h);
        double loglik = -0.5 * f.dot(Kinv * f);
        loglik += std::log(oracles::sigmoid(f[0]));
        loglik += std::log(1.0 - oracles::sigmoid(f[1]));
        const double dens = w[i] * w[j] * std::exp(loglik);
        mass += dens;
        // per-point sign disagreement averaged over the two points
        double e2 = 0.0;
        if (f[0] <= 0.0) e2 += 0.5;
        if (f[1] > 0.0) e2 += 0.5;
        err += dens * e2;
      }
    }
    const double want = err / mass;
    INFO("risk " << risk << " oracle " << want);
    CHECK(std::abs(risk - want) < 0.015);
  }
}

TEST_CASE("kl estimate components") {
  MatrixXd K(1, 1);
  K << 1.0;
  VectorXi y(1);
  y << 1;

  SECTION("closed-form conditional term on the unit case") {
    std::vector<JointSample> samples;
    for (int i = 0; i < 2; ++i) {
      JointSample js;
      js.f = VectorXd::Zero(1);
      js.omega = VectorXd::Constant(1, 1.0);
      samples.push_back(js);
    }
    const auto est = kl_estimate(K, y, samples);
    const double want = 0.5 * (std::log(2.0) - 1.0 + 0.5 + 1.0 / 16.0);
    CHECK(est.conditional_term == Catch::Approx(want).margin(1e-12));
    // identical f values make every tilt ratio one
    CHECK(est.mixture_term == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("posterior forced to the prior drives the estimate to zero") {
    // synthetic injection: kappa = 0 and vanishing omega make the
    // conditional exactly the prior, and constant (omega, f) pairs make
    // the mixture ratios one
    const KernelConfig cfg{1.0, 1.0};
    Rng g(7);
    MatrixXd e = random_embeddings(2, 1, g);
    const MatrixXd Kq = gram_self(cfg, e).materialize();
    std::vector<JointSample> samples;
    for (int i = 0; i < 50; ++i) {
      JointSample js;
      js.f = VectorXd::Zero(2);
      js.omega = VectorXd::Constant(2, 1e-9);
      samples.push_back(js);
    }
    const auto est = kl_estimate(Kq, VectorXd(VectorXd::Zero(2)), samples);
    CHECK(std::abs(est.kl) < 1e-6);
  }

  SECTION("mixture term is never significantly positive") {
    const KernelConfig cfg;
    for (unsigned seed = 0; seed < 20; ++seed) {
      Rng g(100 + seed);
      const int n = 2 + static_cast<int>(g() % 3);
      const MatrixXd e = random_embeddings(n, 2, g);
      const MatrixXd Kq = gram_self(cfg, e).materialize();
      VectorXi yq(n);
      for (int i = 0; i < n; ++i) yq[i] = static_cast<int>(g() % 2);
      const auto samples = run_chains(Kq, yq, 10, 10, 3, 10, g);
      const auto est = kl_estimate(Kq, yq, samples);
      REQUIRE(est.mixture_term <= 3.0 * est.stderr_ + 0.05);
    }
  }

  SECTION("fewer than two samples is an error") {
    std::vector<JointSample> one(1);
    one[0].f = VectorXd::Zero(1);
    one[0].omega = VectorXd::Constant(1, 0.25);
    CHECK_THROWS_AS(kl_estimate(K, y, one), std::invalid_argument);
  }
}

TEST_CASE("bound report on a separable binary client") {
  const KernelConfig cfg;
  Rng g(8);
  const int n = 64, n_test = 64;
  MatrixXd Xtr(n, 2), Xte(n_test, 2);
  VectorXi ytr(n), yte(n_test);
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    ytr[i] = c;
    Xtr.row(i) << (c ? 2.0 : -2.0) + 0.7 * rng::normal(g),
        (c ? -2.0 : 2.0) + 0.7 * rng::normal(g);
  }
  for (int i = 0; i < n_test; ++i) {
    const int c = i % 2;
    yte[i] = c;
    Xte.row(i) << (c ? 2.0 : -2.0) + 0.7 * rng::normal(g),
        (c ? -2.0 : 2.0) + 0.7 * rng::normal(g);
  }
  const MatrixXd K = gram_self(cfg, Xtr).materialize();
  const MatrixXd Kstar = gram(cfg, Xtr, Xte);
  const VectorXd kss = VectorXd::Constant(n_test, cfg.output_scale);

  BoundBudgets budgets;
  Rng gb(9);
  const BoundReport report =
      bound_report(K, ytr, Kstar, kss, yte, 0.01, budgets, gb);

  CHECK(report.bound >= report.empirical_gibbs_risk);
  CHECK(report.bound < 0.5);  // non-vacuous on separable data
  CHECK(report.test_gibbs_risk <= report.bound);
  CHECK(report.kl > 0.0);
  CHECK(report.empirical_bayes_risk <=
        2.0 * report.empirical_gibbs_risk + 1e-9);
  CHECK(report.test_bayes_risk <= 2.0 * report.test_gibbs_risk + 1e-9);

  SECTION("epsilon shrinks as n grows at fixed KL") {
    const double e64 = (report.kl + std::log(65.0 / 0.01)) / 64.0;
    const double e128 = (report.kl + std::log(129.0 / 0.01)) / 128.0;
    CHECK(e128 < e64);
    CHECK(report.epsilon == Catch::Approx(e64).margin(1e-12));
  }
  SECTION("delta outside (0,1) is rejected") {
    Rng gg(10);
    CHECK_THROWS_AS(
        bound_report(K, ytr, Kstar, kss, yte, 0.0, budgets, gg),
        std::invalid_argument);
  }
}
