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
#include <vector>

#include "fedgp/gpc_node.hpp"
#include "fedgp/polya_gamma.hpp"

namespace fedgp {

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

/// KL divergence between Bernoulli(q) and Bernoulli(p).
inline double binary_kl(double q, double p) {
  if (q < 0.0 || q > 1.0 || p < 0.0 || p > 1.0) {
    throw std::invalid_argument("binary_kl: arguments must lie in [0, 1]");
  }
  const auto term = [](double a, double b) {
    if (a <= 0.0) return 0.0;
    if (b <= 0.0) return std::numeric_limits<double>::infinity();
    return a * std::log(a / b);
  };
  return term(q, p) + term(1.0 - q, 1.0 - p);
}

/// Largest p >= q with KL(q || p) <= eps, by bisection to 1e-10.
inline double kl_inverse_ber(double q, double eps) {
  if (q < 0.0 || q > 1.0) {
    throw std::invalid_argument("kl_inverse_ber: q must lie in [0, 1]");
  }
  if (eps < 0.0) throw std::invalid_argument("kl_inverse_ber: eps >= 0");
  if (eps == 0.0 || q >= 1.0) return q;
  double lo = q, hi = 1.0;
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    if (binary_kl(q, mid) > eps) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return lo;
}

/// Everything the bound produces for one binary node GP.
struct BoundReport {
  double empirical_gibbs_risk = 0.0;
  double test_gibbs_risk = 0.0;
  double empirical_bayes_risk = 0.0;
  double test_bayes_risk = 0.0;
  double kl = 0.0;
  double kl_stderr = 0.0;
  double epsilon = 0.0;
  double bound = 0.0;
  double delta = 0.0;
  long n_train = 0;
  long n_test = 0;
  int kl_samples = 0;
  long risk_samples = 0;
};

struct BoundBudgets {
  int chains = 20;
  int burn_in = 5;
  int steps_between_samples = 5;
  int kl_samples = 200;     // retained joint samples for the KL estimate
  long risk_samples = 2000;  // posterior f draws for the empirical risk
};

namespace bound_detail {

inline Eigen::VectorXd to_pm1(const Eigen::VectorXi& y01) {
  Eigen::VectorXd s(y01.size());
  for (Eigen::Index i = 0; i < y01.size(); ++i) {
    s[i] = y01[i] == 1 ? 1.0 : -1.0;
  }
  return s;
}

}  // namespace bound_detail

/// Empirical Gibbs risk: Monte Carlo average over posterior f samples of
/// the per-point sign disagreement with the +-1 labels. The provided
/// chain samples are consumed first; when n_samples exceeds them, fresh
/// draws from the f | omega conditionals top the budget up.
inline double gibbs_empirical_risk(const Eigen::MatrixXd& K,
                                   const Eigen::VectorXi& y01,
                                   const std::vector<JointSample>& samples,
                                   long n_samples, Rng& g) {
  if (samples.empty() || n_samples < 1) {
    throw std::invalid_argument("gibbs_empirical_risk: need samples");
  }
  const Eigen::VectorXd s = bound_detail::to_pm1(y01);
  const long n = y01.size();

  double err = 0.0;
  long used = 0;
  const auto count_errors = [&](const Eigen::VectorXd& f) {
    for (long i = 0; i < n; ++i) {
      const double sign_f = f[i] > 0.0 ? 1.0 : -1.0;
      if (sign_f != s[i]) err += 1.0;
    }
    ++used;
  };
  for (std::size_t t = 0; t < samples.size() && used < n_samples; ++t) {
    count_errors(samples[t].f);
  }
  if (used < n_samples) {
    const linalg::Cholesky prior_chol = linalg::factorize(K);
    std::vector<linalg::Cholesky> chols;
    chols.reserve(samples.size());
    for (const auto& js : samples) {
      Eigen::MatrixXd C = K;
      C.diagonal() += js.omega.cwiseInverse();
      chols.push_back(linalg::factorize(C));
    }
    const Eigen::VectorXd kap = kappa_of(y01);
    for (long t = used; t < n_samples; ++t) {
      const std::size_t pick = t % samples.size();
      const Eigen::VectorXd& omega = samples[pick].omega;
      Eigen::VectorXd zeta(n), eps(n);
      for (long i = 0; i < n; ++i) zeta[i] = rng::normal(g);
      const Eigen::VectorXd prior_draw = prior_chol.lower_times(zeta);
      for (long i = 0; i < n; ++i) {
        eps[i] = rng::normal(g) / std::sqrt(omega[i]);
      }
      const Eigen::VectorXd z = kap.array() / omega.array();
      const Eigen::VectorXd f =
          prior_draw + K * chols[pick].solve(z - prior_draw - eps);
      count_errors(f);
    }
  }
  return err / (static_cast<double>(n_samples) * n);
}

struct KlEstimate {
  double kl = 0.0;
  double stderr_ = 0.0;
  double conditional_term = 0.0;  // E_w KL(Q(f|w) || P(f))
  double mixture_term = 0.0;      // leave-one-out estimate of -MI(f; w)
};

/// KL(Q(f) || P(f)) of the augmented posterior against the prior:
/// the omega-averaged closed-form Gaussian KL plus the leave-one-out
/// mixture estimate of the (negative) mutual information. Density ratios
/// of the omega conditionals reduce to exponential-tilt factors, so the
/// intractable base density never appears.
inline KlEstimate kl_estimate(const Eigen::MatrixXd& K,
                              const Eigen::VectorXd& kappa,
                              const std::vector<JointSample>& samples) {
  const int n = static_cast<int>(samples.size());
  if (n < 2) {
    throw std::invalid_argument("kl_estimate: need at least two samples");
  }
  std::vector<double> per_sample(n, 0.0);
  double cond_total = 0.0, mix_total = 0.0;

  // log Q(w_i | f_j) up to the shared base density
  const auto log_tilt_vec = [](const Eigen::VectorXd& omega,
                               const Eigen::VectorXd& f) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < omega.size(); ++k) {
      acc += pg_log_tilt(omega[k], f[k]);
    }
    return acc;
  };

  for (int i = 0; i < n; ++i) {
    const double cond = conditional_prior_kl(K, kappa, samples[i].omega);

    const double self = log_tilt_vec(samples[i].omega, samples[i].f);
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(n - 1);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double t = log_tilt_vec(samples[i].omega, samples[j].f) - self;
      terms.push_back(t);
      max_term = std::max(max_term, t);
    }
    double lse = 0.0;
    for (double t : terms) lse += std::exp(t - max_term);
    const double mix = max_term + std::log(lse / (n - 1));

    per_sample[i] = cond + mix;
    cond_total += cond;
    mix_total += mix;
  }

  KlEstimate out;
  out.conditional_term = cond_total / n;
  out.mixture_term = mix_total / n;
  out.kl = out.conditional_term + out.mixture_term;
  double var = 0.0;
  for (double v : per_sample) var += (v - out.kl) * (v - out.kl);
  var /= (n - 1.0);
  out.stderr_ = std::sqrt(var / n);
  return out;
}

inline KlEstimate kl_estimate(const Eigen::MatrixXd& K,
                              const Eigen::VectorXi& y01,
                              const std::vector<JointSample>& samples) {
  return kl_estimate(K, Eigen::VectorXd(kappa_of(y01)), samples);
}

/// Assembles the generalization-bound report for one frozen-kernel binary
/// client: risks, the KL estimate, the epsilon term and the inverted-KL
/// upper bound.
inline BoundReport bound_report(const Eigen::MatrixXd& K,
                                const Eigen::VectorXi& y01,
                                const Eigen::MatrixXd& Kstar_cols,
                                const Eigen::VectorXd& kss,
                                const Eigen::VectorXi& y01_test, double delta,
                                const BoundBudgets& budgets, Rng& g) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("bound_report: delta must lie in (0, 1)");
  }
  const long n = y01.size();
  BoundReport report;
  report.delta = delta;
  report.n_train = n;
  report.n_test = y01_test.size();
  report.risk_samples = budgets.risk_samples;

  const int per_chain =
      (budgets.kl_samples + budgets.chains - 1) / budgets.chains;
  const auto samples =
      run_chains(K, y01, budgets.chains, budgets.burn_in,
                 budgets.steps_between_samples, per_chain, g);
  report.kl_samples = static_cast<int>(samples.size());

  report.empirical_gibbs_risk =
      gibbs_empirical_risk(K, y01, samples, budgets.risk_samples, g);

  const KlEstimate kl = kl_estimate(K, y01, samples);
  report.kl = kl.kl;
  report.kl_stderr = kl.stderr_;
  report.epsilon =
      (kl.kl + std::log((static_cast<double>(n) + 1.0) / delta)) /
      static_cast<double>(n);
  report.bound = kl_inverse_ber(report.empirical_gibbs_risk, report.epsilon);

  // posterior predictors per retained omega, shared across test points
  std::vector<NodePosterior> posts;
  posts.reserve(samples.size());
  for (const auto& js : samples) posts.emplace_back(K, y01, js.omega);

  // empirical Bayes risk: sign of the averaged latent mean
  Eigen::VectorXd mean_f = Eigen::VectorXd::Zero(n);
  for (const auto& js : samples) mean_f += js.f;
  mean_f /= static_cast<double>(samples.size());
  long bayes_err = 0;
  const Eigen::VectorXd s_train = bound_detail::to_pm1(y01);
  for (long i = 0; i < n; ++i) {
    const double sign_m = mean_f[i] > 0.0 ? 1.0 : -1.0;
    if (sign_m != s_train[i]) ++bayes_err;
  }
  report.empirical_bayes_risk = static_cast<double>(bayes_err) / n;

  if (report.n_test > 0) {
    const Eigen::VectorXd s_test = bound_detail::to_pm1(y01_test);
    double gibbs_err = 0.0;
    long bayes_test_err = 0;
    for (long t = 0; t < report.n_test; ++t) {
      double mu_avg = 0.0, point_err = 0.0;
      for (const auto& post : posts) {
        const auto p = post.predict(Kstar_cols.col(t), kss[t]);
        point_err += normal_cdf(-s_test[t] * p.mu / std::sqrt(p.var));
        mu_avg += p.mu;
      }
      gibbs_err += point_err / static_cast<double>(posts.size());
      mu_avg /= static_cast<double>(posts.size());
      const double sign_m = mu_avg > 0.0 ? 1.0 : -1.0;
      if (sign_m != s_test[t]) ++bayes_test_err;
    }
    report.test_gibbs_risk = gibbs_err / static_cast<double>(report.n_test);
    report.test_bayes_risk =
        static_cast<double>(bayes_test_err) / static_cast<double>(report.n_test);
  }
  return report;
}

}  // namespace fedgp
