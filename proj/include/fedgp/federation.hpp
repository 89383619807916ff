/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedgp/data.hpp"
#include "fedgp/gp_tree.hpp"
#include "fedgp/metrics.hpp"

namespace fedgp {

/// One simulated client: disjoint train/validation/test splits plus the
/// class list its labels actually cover.
struct ClientShard {
  int id = 0;
  Dataset train, val, test;
  std::vector<int> classes;
  int noise_model = -1;
};

struct PartitionConfig {
  int n_clients = 10;
  int classes_per_client = 2;
  double train_fraction = 0.6;
  double val_fraction = 0.0;
  // unnormalized per-client class fraction law U(0.4, 0.6)
  double fraction_low = 0.4;
  double fraction_high = 0.6;
};

struct FederationConfig {
  int rounds = 100;
  int clients_per_round = 5;
  int local_epochs = 1;
  enum class Weighting { uniform, by_sample_count };
  Weighting weighting = Weighting::by_sample_count;
  std::uint64_t seed = 1;
  int workers = 1;
};

namespace fed_detail {

/// Largest-remainder allocation of `total` items proportional to weights.
inline std::vector<long> largest_remainder(const std::vector<double>& weights,
                                           long total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<long> counts(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  long assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = total * weights[i] / sum;
    counts[i] = static_cast<long>(exact);
    assigned += counts[i];
    rema.push_back({exact - counts[i], i});
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (long k = 0; k < total - assigned; ++k) {
    counts[rema[static_cast<std::size_t>(k) % rema.size()].second] += 1;
  }
  return counts;
}

inline Dataset take_rows(const Dataset& ds, const std::vector<long>& rows) {
  Dataset out;
  out.n_classes = ds.n_classes;
  out.X.resize(rows.size(), ds.dim());
  out.y.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.X.row(static_cast<long>(i)) = ds.X.row(rows[i]);
    out.y[static_cast<long>(i)] = ds.y[rows[i]];
  }
  return out;
}

}  // namespace fed_detail

/// Splits a dataset into per-client shards: every client samples k classes
/// (resampled until each class has at least one holder), then each class is
/// divided among its holders by normalized U(0.4, 0.6) fractions. Shards
/// are disjoint and exhaustive per class; within a client, train/val/test
/// splits are stratified per class.
inline std::vector<ClientShard> partition(const Dataset& ds,
                                          const PartitionConfig& cfg, Rng& g) {
  if (cfg.n_clients < 1 || cfg.classes_per_client < 1 ||
      cfg.classes_per_client > ds.n_classes) {
    throw std::invalid_argument("partition: infeasible class count");
  }
  if (static_cast<long>(cfg.n_clients) * cfg.classes_per_client <
      ds.n_classes) {
    throw std::invalid_argument(
        "partition: not enough client slots to cover every class");
  }
  if (cfg.train_fraction <= 0.0 ||
      cfg.train_fraction + cfg.val_fraction > 1.0 + 1e-12) {
    throw std::invalid_argument("partition: bad split fractions");
  }

  // class membership per client, resampled until every class is held
  std::vector<std::vector<int>> client_classes;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    client_classes.assign(cfg.n_clients, {});
    std::vector<bool> covered(ds.n_classes, false);
    for (int i = 0; i < cfg.n_clients; ++i) {
      std::vector<int> pool(ds.n_classes);
      std::iota(pool.begin(), pool.end(), 0);
      for (int k = 0; k < cfg.classes_per_client; ++k) {
        const std::size_t pick = k + g() % (pool.size() - k);
        std::swap(pool[k], pool[pick]);
        client_classes[i].push_back(pool[k]);
        covered[pool[k]] = true;
      }
      std::sort(client_classes[i].begin(), client_classes[i].end());
    }
    if (std::all_of(covered.begin(), covered.end(), [](bool b) { return b; })) {
      break;
    }
    client_classes.clear();
  }
  if (client_classes.empty()) {
    throw std::runtime_error("partition: failed to cover all classes");
  }

  // rows per class, shuffled once
  std::vector<std::vector<long>> class_rows(ds.n_classes);
  for (long i = 0; i < ds.n(); ++i) class_rows[ds.y[i]].push_back(i);
  for (auto& rows : class_rows) {
    for (std::size_t i = rows.size(); i > 1; --i) {
      std::swap(rows[i - 1], rows[g() % i]);
    }
  }

  // per-class allocation to holders by normalized random fractions
  std::vector<std::vector<std::vector<long>>> rows_of(
      cfg.n_clients, std::vector<std::vector<long>>(ds.n_classes));
  for (int c = 0; c < ds.n_classes; ++c) {
    std::vector<int> holders;
    for (int i = 0; i < cfg.n_clients; ++i) {
      if (std::binary_search(client_classes[i].begin(),
                             client_classes[i].end(), c)) {
        holders.push_back(i);
      }
    }
    std::vector<double> fractions(holders.size());
    for (auto& f : fractions) {
      f = cfg.fraction_low +
          (cfg.fraction_high - cfg.fraction_low) * rng::uniform(g);
    }
    const std::vector<long> counts = fed_detail::largest_remainder(
        fractions, static_cast<long>(class_rows[c].size()));
    long offset = 0;
    for (std::size_t h = 0; h < holders.size(); ++h) {
      for (long k = 0; k < counts[h]; ++k) {
        rows_of[holders[h]][c].push_back(class_rows[c][offset++]);
      }
    }
  }

  std::vector<ClientShard> shards(cfg.n_clients);
  for (int i = 0; i < cfg.n_clients; ++i) {
    shards[i].id = i;
    shards[i].classes = client_classes[i];
    std::vector<long> train_rows, val_rows, test_rows;
    for (int c = 0; c < ds.n_classes; ++c) {
      const auto& rows = rows_of[i][c];
      if (rows.empty()) continue;
      const long n = static_cast<long>(rows.size());
      long n_train = static_cast<long>(std::round(cfg.train_fraction * n));
      n_train = std::clamp<long>(n_train, 1, n);
      long n_val = static_cast<long>(std::round(cfg.val_fraction * n));
      n_val = std::clamp<long>(n_val, 0, n - n_train);
      for (long k = 0; k < n; ++k) {
        if (k < n_train) {
          train_rows.push_back(rows[k]);
        } else if (k < n_train + n_val) {
          val_rows.push_back(rows[k]);
        } else {
          test_rows.push_back(rows[k]);
        }
      }
    }
    shards[i].train = fed_detail::take_rows(ds, train_rows);
    shards[i].val = fed_detail::take_rows(ds, val_rows);
    shards[i].test = fed_detail::take_rows(ds, test_rows);
  }
  return shards;
}

struct NoiseModel {
  enum class Kind { gaussian, dropout, scale_shift };
  Kind kind = Kind::gaussian;
  double a = 0.0;  // sigma / drop probability / scale
  double b = 0.0;  // shift (scale_shift only)
};

inline NoiseModel parse_noise_model(const std::string& name, double a,
                                    double b) {
  NoiseModel m;
  m.a = a;
  m.b = b;
  if (name == "gaussian") {
    m.kind = NoiseModel::Kind::gaussian;
  } else if (name == "dropout") {
    m.kind = NoiseModel::Kind::dropout;
  } else if (name == "scale_shift") {
    m.kind = NoiseModel::Kind::scale_shift;
  } else {
    throw std::invalid_argument("unknown noise model: " + name);
  }
  return m;
}

/// Transforms every split's inputs under the client's noise channel;
/// labels untouched, deterministic given the noise seed.
inline ClientShard apply_noise(const ClientShard& shard,
                               const NoiseModel& model,
                               std::uint64_t noise_seed) {
  ClientShard out = shard;
  Rng g = rng::derive_stream(noise_seed, {0x6e6f697365ULL,
                                          static_cast<std::uint64_t>(shard.id)});
  const auto transform = [&](Eigen::MatrixXd& X) {
    switch (model.kind) {
      case NoiseModel::Kind::gaussian:
        for (long i = 0; i < X.rows(); ++i) {
          for (long j = 0; j < X.cols(); ++j) {
            X(i, j) += model.a * rng::normal(g);
          }
        }
        break;
      case NoiseModel::Kind::dropout:
        for (long i = 0; i < X.rows(); ++i) {
          for (long j = 0; j < X.cols(); ++j) {
            if (rng::uniform(g) < model.a) X(i, j) = 0.0;
          }
        }
        break;
      case NoiseModel::Kind::scale_shift:
        X = (model.a * X.array() + model.b).matrix();
        break;
    }
  };
  transform(out.train.X);
  transform(out.val.X);
  transform(out.test.X);
  return out;
}

/// Shared state the server ships each round.
struct ServerState {
  FeatureNetParams theta;
  KernelConfig kernel;
  std::optional<InducingSet> inducing;
  int round = 0;
};

struct TrainSettings {
  TrainOptions tree;
  GibbsConfig gibbs;
  SgdConfig sgd;
};

struct ClientUpdate {
  int client_id = 0;
  FeatureNetParams theta;
  Eigen::MatrixXd xbar;
  double objective = 0.0;
  long n_train = 0;
};

/// One client's local pass: `local_epochs` plan/evaluate/ascend steps from
/// the received global snapshot. Momentum buffers are reset each round.
inline ClientUpdate local_train(const ServerState& server,
                                const ClientShard& shard,
                                const TrainSettings& settings,
                                int local_epochs, std::uint64_t master_seed,
                                int round) {
  ClientUpdate up;
  up.client_id = shard.id;
  up.n_train = shard.train.n();
  FeatureNetParams theta = server.theta;
  std::optional<InducingSet> inducing = server.inducing;

  Rng g = rng::derive_stream(master_seed,
                             {0x726f756e64ULL, static_cast<std::uint64_t>(round),
                              static_cast<std::uint64_t>(shard.id)});
  SgdState state;
  Eigen::MatrixXd xbar_vel;
  if (inducing) {
    xbar_vel = Eigen::MatrixXd::Zero(inducing->X.rows(), inducing->X.cols());
  }
  for (int epoch = 0; epoch < local_epochs; ++epoch) {
    const InducingSet* ind = inducing ? &*inducing : nullptr;
    const LocalStepPlan plan =
        plan_local_step(theta, ind, server.kernel, shard.train.X,
                        shard.train.y, settings.tree, settings.gibbs, g);
    const ObjectiveGrad r =
        eval_objective(theta, ind, server.kernel, shard.train.X, plan,
                       settings.tree, settings.gibbs);
    up.objective = r.value;
    sgd_ascend(theta, r.dtheta, settings.sgd, state);
    if (inducing) {
      xbar_vel = settings.sgd.momentum * xbar_vel + r.dxbar;
      inducing->X += settings.sgd.learning_rate * xbar_vel;
    }
  }
  up.theta = theta;
  if (inducing) up.xbar = inducing->X;
  return up;
}

struct RoundLog {
  int round = 0;
  std::vector<int> sampled_clients;
  std::vector<double> objectives;
  double wall_time_s = 0.0;
};

namespace fed_detail {

inline std::vector<int> sample_clients(int n_clients, int s, Rng& g) {
  std::vector<int> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  for (int k = 0; k < s; ++k) {
    const std::size_t pick = k + g() % (ids.size() - k);
    std::swap(ids[k], ids[pick]);
  }
  ids.resize(s);
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  const int k = std::min(workers, n);
  for (int w = 0; w < k; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace fed_detail

/// One communication round: sample S clients, train them locally from the
/// current global snapshot, then replace the global parameters with the
/// configured weighted average. Per-client randomness is derived from
/// (seed, round, client id), so results do not depend on the worker count.
inline ServerState run_round(const ServerState& server,
                             const std::vector<ClientShard>& clients,
                             const FederationConfig& cfg,
                             const TrainSettings& settings, int round,
                             RoundLog* log) {
  if (cfg.clients_per_round < 1 ||
      cfg.clients_per_round > static_cast<int>(clients.size())) {
    throw std::invalid_argument("run_round: bad clients_per_round");
  }
  const auto t0 = std::chrono::steady_clock::now();
  Rng g = rng::derive_stream(cfg.seed,
                             {0x73616d706cULL, static_cast<std::uint64_t>(round)});
  const std::vector<int> sampled = fed_detail::sample_clients(
      static_cast<int>(clients.size()), cfg.clients_per_round, g);

  std::vector<ClientUpdate> updates(sampled.size());
  std::vector<std::string> failures(sampled.size());
  fed_detail::parallel_for(
      static_cast<int>(sampled.size()), cfg.workers, [&](int i) {
        try {
          updates[i] = local_train(server, clients[sampled[i]], settings,
                                   cfg.local_epochs, cfg.seed, round);
        } catch (const std::exception& e) {
          failures[i] = e.what();
        }
      });
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    if (!failures[i].empty()) {
      throw std::runtime_error("client " + std::to_string(sampled[i]) +
                               " failed in round " + std::to_string(round) +
                               ": " + failures[i]);
    }
  }

  // weighted average of the returned parameters
  std::vector<double> w(sampled.size(), 1.0);
  if (cfg.weighting == FederationConfig::Weighting::by_sample_count) {
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      w[i] = static_cast<double>(updates[i].n_train);
    }
  }
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);

  ServerState out = server;
  out.round = round + 1;
  out.theta = zeros_like(server.theta);
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    axpy(w[i] / wsum, updates[i].theta, out.theta);
  }
  if (server.inducing) {
    out.inducing->X.setZero();
    for (std::size_t i = 0; i < sampled.size(); ++i) {
      out.inducing->X += (w[i] / wsum) * updates[i].xbar;
    }
  }

  if (log) {
    log->round = round;
    log->sampled_clients = sampled;
    log->objectives.clear();
    for (const auto& u : updates) log->objectives.push_back(u.objective);
    log->wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
  }
  return out;
}

struct ClientEval {
  int id = 0;
  long n_test = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double brier = 0.0;
};

struct EvalReport {
  std::vector<ClientEval> clients;
  long total_samples = 0;
  double federated_accuracy = 0.0;
  double federated_ece = 0.0;
  double federated_mce = 0.0;
  double federated_brier = 0.0;
  std::vector<ReliabilityBin> reliability;
};

/// Builds every client's personal predictor under the final shared
/// parameters and scores its test split; federated numbers are
/// sample-weighted over all clients.
inline EvalReport evaluate_federated(const ServerState& server,
                                     const std::vector<ClientShard>& clients,
                                     const TrainSettings& settings,
                                     std::uint64_t master_seed,
                                     int workers = 1, int reliability_bins = 10) {
  EvalReport report;
  report.clients.resize(clients.size());
  std::vector<std::vector<double>> conf(clients.size());
  std::vector<std::vector<bool>> correct(clients.size());
  std::vector<double> brier_sum(clients.size(), 0.0);
  std::vector<std::string> failures(clients.size());

  fed_detail::parallel_for(
      static_cast<int>(clients.size()), workers, [&](int i) {
        try {
          const ClientShard& shard = clients[i];
          ClientEval ev;
          ev.id = shard.id;
          ev.n_test = shard.test.n();
          if (shard.test.n() == 0 || shard.train.n() == 0) {
            report.clients[i] = ev;
            return;
          }
          Rng g = rng::derive_stream(
              master_seed, {0x6576616cULL, static_cast<std::uint64_t>(shard.id)});
          const InducingSet* ind =
              server.inducing ? &*server.inducing : nullptr;
          const ClientModel model(server.theta, server.kernel, ind,
                                  shard.train.X, shard.train.y, settings.tree,
                                  settings.gibbs, g);
          const auto& ids = model.tree().class_ids;
          long hits = 0;
          for (long t = 0; t < shard.test.n(); ++t) {
            const Eigen::VectorXd probs =
                model.predict_input(shard.test.X.row(t));
            int arg = 0;
            probs.maxCoeff(&arg);
            const bool ok = ids[arg] == shard.test.y[t];
            hits += ok ? 1 : 0;
            conf[i].push_back(probs[arg]);
            correct[i].push_back(ok);
            double b = 0.0;
            for (Eigen::Index c = 0; c < probs.size(); ++c) {
              const double target = ids[c] == shard.test.y[t] ? 1.0 : 0.0;
              b += (probs[c] - target) * (probs[c] - target);
            }
            // labels outside the client's class list score as pure misses
            if (!std::binary_search(ids.begin(), ids.end(), shard.test.y[t])) {
              b += 1.0;
            }
            brier_sum[i] += b;
          }
          ev.accuracy = static_cast<double>(hits) / shard.test.n();
          ev.ece = ece(conf[i], correct[i], reliability_bins);
          ev.mce = mce(conf[i], correct[i], reliability_bins);
          ev.brier = brier_sum[i] / shard.test.n();
          report.clients[i] = ev;
        } catch (const std::exception& e) {
          failures[i] = e.what();
        }
      });
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (!failures[i].empty()) {
      throw std::runtime_error("evaluation failed for client " +
                               std::to_string(clients[i].id) + ": " +
                               failures[i]);
    }
  }

  std::vector<double> all_conf;
  std::vector<bool> all_correct;
  double brier_total = 0.0;
  double acc_weighted = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    report.total_samples += report.clients[i].n_test;
    acc_weighted += report.clients[i].accuracy * report.clients[i].n_test;
    brier_total += brier_sum[i];
    all_conf.insert(all_conf.end(), conf[i].begin(), conf[i].end());
    all_correct.insert(all_correct.end(), correct[i].begin(),
                       correct[i].end());
  }
  if (report.total_samples > 0) {
    report.federated_accuracy = acc_weighted / report.total_samples;
    report.federated_brier = brier_total / report.total_samples;
    report.federated_ece = ece(all_conf, all_correct, reliability_bins);
    report.federated_mce = mce(all_conf, all_correct, reliability_bins);
    report.reliability =
        reliability_export(all_conf, all_correct, reliability_bins);
  }
  return report;
}

/// Normalized Gamma draws: one sample from Dirichlet(alpha * 1_T).
/// Small concentrations are sampled in log space via the shape-boost
/// identity Gamma(a) = Gamma(a + 1) * U^{1/a}, so near-one-hot draws do
/// not underflow.
inline Eigen::VectorXd dirichlet(double alpha, int t, Rng& g) {
  if (!(alpha > 0.0) || t < 1) {
    throw std::invalid_argument("dirichlet: alpha > 0 and t >= 1 required");
  }
  Eigen::VectorXd logs(t);
  for (int i = 0; i < t; ++i) {
    if (alpha < 0.1) {
      const double boosted = std::max(rng::gamma(g, alpha + 1.0), 1e-300);
      logs[i] = std::log(boosted) +
                std::log(std::max(rng::uniform(g), 1e-300)) / alpha;
    } else {
      logs[i] = std::log(std::max(rng::gamma(g, alpha), 1e-300));
    }
  }
  const double top = logs.maxCoeff();
  Eigen::VectorXd p = (logs.array() - top).exp();
  return p / p.sum();
}

/// Novel clients whose class proportions are Dirichlet draws over the
/// remainder pool. They never touch the shared parameters; only their
/// personal GP state is ever fit.
inline std::vector<ClientShard> spawn_ood_clients(const Dataset& remainder,
                                                  double dirichlet_alpha,
                                                  int n_new,
                                                  long samples_per_client,
                                                  double train_fraction,
                                                  Rng& g) {
  if (n_new == 0) return {};
  if (remainder.n() == 0) {
    throw std::invalid_argument("spawn_ood_clients: empty remainder");
  }
  if (static_cast<long>(n_new) * samples_per_client > remainder.n()) {
    throw std::invalid_argument("spawn_ood_clients: not enough samples");
  }
  std::vector<std::vector<long>> class_rows(remainder.n_classes);
  for (long i = 0; i < remainder.n(); ++i) {
    class_rows[remainder.y[i]].push_back(i);
  }
  for (auto& rows : class_rows) {
    for (std::size_t i = rows.size(); i > 1; --i) {
      std::swap(rows[i - 1], rows[g() % i]);
    }
  }
  std::vector<std::size_t> used(remainder.n_classes, 0);

  std::vector<ClientShard> shards;
  for (int k = 0; k < n_new; ++k) {
    const Eigen::VectorXd p = dirichlet(dirichlet_alpha, remainder.n_classes, g);
    std::vector<double> weights(p.data(), p.data() + p.size());
    std::vector<long> want =
        fed_detail::largest_remainder(weights, samples_per_client);
    std::vector<long> rows;
    for (int c = 0; c < remainder.n_classes; ++c) {
      const long avail =
          static_cast<long>(class_rows[c].size() - used[c]);
      const long take = std::min(want[c], avail);
      for (long i = 0; i < take; ++i) rows.push_back(class_rows[c][used[c]++]);
    }
    ClientShard shard;
    shard.id = 1000 + k;
    Dataset mine = fed_detail::take_rows(remainder, rows);
    // stratified train/test split inside the novel client
    std::vector<long> tr, te;
    std::vector<std::vector<long>> by_class(remainder.n_classes);
    for (long i = 0; i < mine.n(); ++i) by_class[mine.y[i]].push_back(i);
    for (auto& idx : by_class) {
      if (idx.empty()) continue;
      long n_train = static_cast<long>(
          std::round(train_fraction * static_cast<double>(idx.size())));
      n_train = std::clamp<long>(n_train, 1, static_cast<long>(idx.size()));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        (static_cast<long>(i) < n_train ? tr : te).push_back(idx[i]);
      }
    }
    shard.train = fed_detail::take_rows(mine, tr);
    shard.test = fed_detail::take_rows(mine, te);
    for (int c = 0; c < remainder.n_classes; ++c) {
      if (!by_class[c].empty()) shard.classes.push_back(c);
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

}  // namespace fedgp
