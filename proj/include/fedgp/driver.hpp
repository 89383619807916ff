/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedgp/bound.hpp"
#include "fedgp/checkpoint.hpp"

namespace fedgp {

namespace fs = std::filesystem;

/// One structured run configuration; file keys and CLI flags share names.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string variant = "exact";  // exact | ip-data | ip-compute
  std::string objective = "predictive";
  int rounds = 100;
  int clients_per_round = 5;
  int local_epochs = 1;
  std::string weighting = "by_sample_count";
  double learning_rate = 0.05;
  double momentum = 0.9;
  double loss_scale = 1.0;
  double holdout_fraction = 0.5;
  int train_chains = 20;
  int test_chains = 30;
  int steps_between_samples = 5;
  int burn_in = 5;
  int gh_degree = 20;
  double length_scale = 1.0;
  double output_scale = 8.0;
  std::vector<int> hidden = {64};
  int embed_dim = 32;
  int inducing_per_class = 10;
  bool combine_at_test = true;
  bool resample_test_omega = false;
  std::string correction = "node";  // off | node | leaf
  int checkpoint_every = 25;
  int workers = 1;
};

inline json run_config_to_json(const RunConfig& c) {
  return json{{"seed", c.seed},
              {"variant", c.variant},
              {"objective", c.objective},
              {"rounds", c.rounds},
              {"clients_per_round", c.clients_per_round},
              {"local_epochs", c.local_epochs},
              {"weighting", c.weighting},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"loss_scale", c.loss_scale},
              {"holdout_fraction", c.holdout_fraction},
              {"train_chains", c.train_chains},
              {"test_chains", c.test_chains},
              {"steps_between_samples", c.steps_between_samples},
              {"burn_in", c.burn_in},
              {"gh_degree", c.gh_degree},
              {"length_scale", c.length_scale},
              {"output_scale", c.output_scale},
              {"hidden", c.hidden},
              {"embed_dim", c.embed_dim},
              {"inducing_per_class", c.inducing_per_class},
              {"combine_at_test", c.combine_at_test},
              {"resample_test_omega", c.resample_test_omega},
              {"correction", c.correction},
              {"checkpoint_every", c.checkpoint_every},
              {"workers", c.workers}};
}

/// Parses and validates a config object. Every offending key is collected
/// and reported in one error, never just the first.
inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  std::vector<std::string> errors;
  const json defaults = run_config_to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) {
      errors.push_back("unknown key: " + key);
    }
  }
  const auto get = [&](const char* key, auto& slot) {
    if (!j.contains(key)) return;
    try {
      slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    } catch (const json::exception&) {
      errors.push_back(std::string("bad type for key: ") + key);
    }
  };
  get("seed", c.seed);
  get("variant", c.variant);
  get("objective", c.objective);
  get("rounds", c.rounds);
  get("clients_per_round", c.clients_per_round);
  get("local_epochs", c.local_epochs);
  get("weighting", c.weighting);
  get("learning_rate", c.learning_rate);
  get("momentum", c.momentum);
  get("loss_scale", c.loss_scale);
  get("holdout_fraction", c.holdout_fraction);
  get("train_chains", c.train_chains);
  get("test_chains", c.test_chains);
  get("steps_between_samples", c.steps_between_samples);
  get("burn_in", c.burn_in);
  get("gh_degree", c.gh_degree);
  get("length_scale", c.length_scale);
  get("output_scale", c.output_scale);
  get("hidden", c.hidden);
  get("embed_dim", c.embed_dim);
  get("inducing_per_class", c.inducing_per_class);
  get("combine_at_test", c.combine_at_test);
  get("resample_test_omega", c.resample_test_omega);
  get("correction", c.correction);
  get("checkpoint_every", c.checkpoint_every);
  get("workers", c.workers);

  const std::set<std::string> variants = {"exact", "ip-data", "ip-compute"};
  const std::set<std::string> objectives = {"marginal", "predictive"};
  const std::set<std::string> weightings = {"uniform", "by_sample_count"};
  const std::set<std::string> corrections = {"off", "node", "leaf"};
  if (!variants.count(c.variant)) errors.push_back("variant: " + c.variant);
  if (!objectives.count(c.objective)) {
    errors.push_back("objective: " + c.objective);
  }
  if (!weightings.count(c.weighting)) {
    errors.push_back("weighting: " + c.weighting);
  }
  if (!corrections.count(c.correction)) {
    errors.push_back("correction: " + c.correction);
  }
  if (c.variant == "ip-data" && c.objective == "marginal") {
    errors.push_back(
        "objective: the ip-data variant supports predictive only");
  }
  if (c.rounds < 0) errors.push_back("rounds: must be >= 0");
  if (c.clients_per_round < 1) errors.push_back("clients_per_round: >= 1");
  if (c.local_epochs < 1) errors.push_back("local_epochs: >= 1");
  if (!(c.learning_rate > 0.0)) errors.push_back("learning_rate: > 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) {
    errors.push_back("momentum: in [0, 1)");
  }
  if (!(c.loss_scale > 0.0)) errors.push_back("loss_scale: > 0");
  if (c.holdout_fraction <= 0.0 || c.holdout_fraction > 1.0) {
    errors.push_back("holdout_fraction: in (0, 1]");
  }
  if (c.train_chains < 1 || c.test_chains < 1 ||
      c.steps_between_samples < 1 || c.burn_in < 1 || c.gh_degree < 1) {
    errors.push_back("gibbs settings: all must be >= 1");
  }
  if (!(c.length_scale > 0.0) || !(c.output_scale > 0.0)) {
    errors.push_back("kernel scales: > 0");
  }
  if (c.embed_dim < 1) errors.push_back("embed_dim: >= 1");
  for (int h : c.hidden) {
    if (h < 1) errors.push_back("hidden: all sizes >= 1");
  }
  if (c.inducing_per_class < 1) errors.push_back("inducing_per_class: >= 1");
  if (c.checkpoint_every < 1) errors.push_back("checkpoint_every: >= 1");
  if (c.workers < 1) errors.push_back("workers: >= 1");

  if (!errors.empty()) {
    std::string all = "invalid config:";
    for (const auto& e : errors) all += "\n  - " + e;
    throw std::invalid_argument(all);
  }
  return c;
}

inline Variant variant_of(const RunConfig& c) {
  if (c.variant == "exact") return Variant::exact;
  if (c.variant == "ip-data") return Variant::ip_data;
  return Variant::ip_compute;
}

inline TrainSettings settings_of(const RunConfig& c) {
  TrainSettings s;
  s.tree.variant = variant_of(c);
  s.tree.objective = c.objective == "marginal" ? ObjectiveKind::marginal
                                               : ObjectiveKind::predictive;
  s.tree.holdout_fraction = c.holdout_fraction;
  s.tree.loss_scale = c.loss_scale;
  s.tree.combine_at_test = c.combine_at_test;
  s.tree.resample_test_omega = c.resample_test_omega;
  s.tree.correction = c.correction == "off"
                          ? CorrectionMode::off
                          : (c.correction == "leaf" ? CorrectionMode::leaf
                                                    : CorrectionMode::node);
  s.gibbs.train_chains = c.train_chains;
  s.gibbs.test_chains = c.test_chains;
  s.gibbs.steps_between_samples = c.steps_between_samples;
  s.gibbs.burn_in = c.burn_in;
  s.gibbs.gh_degree = c.gh_degree;
  s.sgd.learning_rate = c.learning_rate;
  s.sgd.momentum = c.momentum;
  return s;
}

inline FederationConfig federation_of(const RunConfig& c) {
  FederationConfig f;
  f.rounds = c.rounds;
  f.clients_per_round = c.clients_per_round;
  f.local_epochs = c.local_epochs;
  f.weighting = c.weighting == "uniform"
                    ? FederationConfig::Weighting::uniform
                    : FederationConfig::Weighting::by_sample_count;
  f.seed = c.seed;
  f.workers = c.workers;
  return f;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  std::string out;
  std::string validate;  // when set, validate this file instead
  BlobConfig blobs;
};

inline int cmd_gen_data(const GenDataOptions& opts, std::ostream& log) {
  if (!opts.validate.empty()) {
    const Dataset ds = read_dataset(opts.validate);
    log << "ok: " << opts.validate << " n=" << ds.n() << " d=" << ds.dim()
        << " classes=" << ds.n_classes << "\n";
    return 0;
  }
  const Dataset ds = make_blobs(opts.blobs);
  write_dataset(opts.out, ds);
  log << "wrote " << opts.out << " n=" << ds.n() << " d=" << ds.dim()
      << " classes=" << ds.n_classes << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// partition

struct PartitionOptions {
  std::string data;
  std::string run_dir;
  PartitionConfig partition;
  std::uint64_t seed = 1;
  std::string noise_model;  // empty = none; applied to every client
  double noise_a = 0.0;
  double noise_b = 0.0;
};

inline std::string client_prefix(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "c%03d", id);
  return buf;
}

inline int cmd_partition(const PartitionOptions& opts, std::ostream& log) {
  const Dataset ds = read_dataset(opts.data);
  Rng g = rng::derive_stream(opts.seed, {0x70617274ULL});
  std::vector<ClientShard> shards = partition(ds, opts.partition, g);

  if (!opts.noise_model.empty()) {
    const NoiseModel model =
        parse_noise_model(opts.noise_model, opts.noise_a, opts.noise_b);
    for (auto& s : shards) {
      s.noise_model = 0;
      s = apply_noise(s, model, opts.seed);
    }
  }

  fs::create_directories(fs::path(opts.run_dir) / "clients");
  json manifest;
  manifest["format"] = "fedgp-manifest";
  manifest["version"] = 1;
  manifest["seed"] = opts.seed;
  manifest["dataset"] = opts.data;
  manifest["n_classes"] = ds.n_classes;
  manifest["dim"] = ds.dim();
  manifest["partition"] = {
      {"n_clients", opts.partition.n_clients},
      {"classes_per_client", opts.partition.classes_per_client},
      {"train_fraction", opts.partition.train_fraction},
      {"val_fraction", opts.partition.val_fraction}};
  if (!opts.noise_model.empty()) {
    manifest["noise"] = {{"model", opts.noise_model},
                         {"a", opts.noise_a},
                         {"b", opts.noise_b}};
  }
  manifest["clients"] = json::array();
  for (const auto& s : shards) {
    const std::string prefix = client_prefix(s.id);
    const fs::path base = fs::path(opts.run_dir) / "clients" / prefix;
    write_dataset(base.string() + ".train.txt", s.train);
    write_dataset(base.string() + ".val.txt", s.val);
    write_dataset(base.string() + ".test.txt", s.test);
    manifest["clients"].push_back({{"id", s.id},
                                   {"classes", s.classes},
                                   {"n_train", s.train.n()},
                                   {"n_val", s.val.n()},
                                   {"n_test", s.test.n()},
                                   {"prefix", "clients/" + prefix}});
  }
  write_json_file((fs::path(opts.run_dir) / "manifest.json").string(),
                  manifest);
  log << "wrote " << shards.size() << " shards under " << opts.run_dir
      << "\n";
  return 0;
}

inline std::vector<ClientShard> load_shards(const std::string& run_dir) {
  const json manifest =
      read_json_file((fs::path(run_dir) / "manifest.json").string());
  if (manifest.at("format") != "fedgp-manifest") {
    throw std::runtime_error("not a run directory: " + run_dir);
  }
  std::vector<ClientShard> shards;
  for (const auto& c : manifest.at("clients")) {
    ClientShard s;
    s.id = c.at("id").get<int>();
    s.classes = c.at("classes").get<std::vector<int>>();
    const std::string prefix =
        (fs::path(run_dir) / c.at("prefix").get<std::string>()).string();
    s.train = read_dataset(prefix + ".train.txt");
    s.val = read_dataset(prefix + ".val.txt");
    s.test = read_dataset(prefix + ".test.txt");
    shards.push_back(std::move(s));
  }
  return shards;
}

// ---------------------------------------------------------------------------
// train

struct TrainCmdOptions {
  std::string run_dir;
  RunConfig config;
};

inline ServerState init_server(const RunConfig& cfg,
                               const std::vector<ClientShard>& shards,
                               int n_classes) {
  ServerState server;
  server.kernel.length_scale = cfg.length_scale;
  server.kernel.output_scale = cfg.output_scale;
  const int d = shards.front().train.dim();
  std::vector<int> arch;
  arch.push_back(d);
  for (int h : cfg.hidden) arch.push_back(h);
  arch.push_back(cfg.embed_dim);
  Rng g = rng::derive_stream(cfg.seed, {0x696e6974ULL});
  server.theta = FeatureNetParams::init(arch, g);

  if (variant_of(cfg) != Variant::exact) {
    long total = 0;
    for (const auto& s : shards) total += s.train.n();
    Eigen::MatrixXd pooled(total, d);
    Eigen::VectorXi labels(total);
    long r = 0;
    for (const auto& s : shards) {
      for (long i = 0; i < s.train.n(); ++i, ++r) {
        pooled.row(r) = s.train.X.row(i);
        labels[r] = s.train.y[i];
      }
    }
    const Eigen::MatrixXd E = embed(server.theta, pooled);
    server.inducing = init_inducing_set(E, labels, n_classes,
                                        cfg.inducing_per_class, 0.1, g);
  }
  return server;
}

inline int cmd_train(const TrainCmdOptions& opts, std::ostream& log) {
  const RunConfig& cfg = opts.config;
  const std::vector<ClientShard> shards = load_shards(opts.run_dir);
  const json manifest =
      read_json_file((fs::path(opts.run_dir) / "manifest.json").string());
  const int n_classes = manifest.at("n_classes").get<int>();

  const fs::path ckpt_dir = fs::path(opts.run_dir) / "checkpoints";
  fs::create_directories(ckpt_dir);
  const std::string latest = (ckpt_dir / "latest.json").string();

  ServerState server;
  if (fs::exists(latest)) {
    server = checkpoint_from_json(read_json_file(latest), nullptr);
    if (server.round >= cfg.rounds) {
      log << "checkpoint already at round " << server.round
          << ", nothing to do\n";
      return 0;
    }
    log << "resuming from round " << server.round << "\n";
  } else {
    server = init_server(cfg, shards, n_classes);
    write_json_file(latest,
                    checkpoint_to_json(server, run_config_to_json(cfg)));
  }

  const TrainSettings settings = settings_of(cfg);
  const FederationConfig fed = federation_of(cfg);
  const std::string rounds_log =
      (fs::path(opts.run_dir) / "rounds.jsonl").string();

  for (int r = server.round; r < cfg.rounds; ++r) {
    RoundLog rl;
    server = run_round(server, shards, fed, settings, r, &rl);
    json rec;
    rec["round"] = rl.round;
    rec["sampled"] = rl.sampled_clients;
    rec["objectives"] = rl.objectives;
    rec["wall_time_s"] = rl.wall_time_s;
    append_jsonl(rounds_log, rec);
    if ((r + 1) % cfg.checkpoint_every == 0 || r + 1 == cfg.rounds) {
      char name[32];
      std::snprintf(name, sizeof(name), "round_%06d.json", r + 1);
      const json j = checkpoint_to_json(server, run_config_to_json(cfg));
      write_json_file((ckpt_dir / name).string(), j);
      write_json_file(latest, j);
    }
  }
  write_json_file(latest,
                  checkpoint_to_json(server, run_config_to_json(cfg)));
  log << "trained to round " << server.round << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::string run_dir;
  std::string checkpoint;  // default: <run_dir>/checkpoints/latest.json
  std::string out;         // default: <run_dir>/results.json
  std::string reliability_out;  // default: <run_dir>/reliability.txt
};

inline int cmd_evaluate(const EvaluateOptions& opts, std::ostream& log) {
  const std::string ckpt_path =
      opts.checkpoint.empty()
          ? (fs::path(opts.run_dir) / "checkpoints" / "latest.json").string()
          : opts.checkpoint;
  json config_echo;
  const ServerState server =
      checkpoint_from_json(read_json_file(ckpt_path), &config_echo);
  const RunConfig cfg = parse_run_config(config_echo);
  const std::vector<ClientShard> shards = load_shards(opts.run_dir);

  const EvalReport report = evaluate_federated(
      server, shards, settings_of(cfg), cfg.seed, cfg.workers);

  json j = eval_report_to_json(report);
  j["checkpoint_round"] = server.round;
  j["seed"] = cfg.seed;
  const std::string out = opts.out.empty()
                              ? (fs::path(opts.run_dir) / "results.json").string()
                              : opts.out;
  write_json_file(out, j);
  const std::string rel =
      opts.reliability_out.empty()
          ? (fs::path(opts.run_dir) / "reliability.txt").string()
          : opts.reliability_out;
  write_reliability(rel, report.reliability);
  log << "federated accuracy " << report.federated_accuracy << " over "
      << report.total_samples << " samples -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bound

struct BoundCmdOptions {
  std::string checkpoint;
  std::string data;  // pool for novel clients
  std::string out;   // bounds.jsonl
  int n_clients = 10;
  std::vector<long> train_sizes = {64};
  long test_size = 128;
  double delta = 0.01;
  BoundBudgets budgets;
  std::uint64_t seed = 7;
};

/// Freezes the checkpointed kernel and fits novel two-class clients,
/// emitting one record per (client, train size).
inline int cmd_bound(const BoundCmdOptions& opts, std::ostream& log) {
  json config_echo;
  const ServerState server =
      checkpoint_from_json(read_json_file(opts.checkpoint), &config_echo);
  const Dataset pool = read_dataset(opts.data);
  if (pool.n_classes < 2) {
    throw std::invalid_argument("bound: pool needs at least two classes");
  }
  if (!opts.out.empty() && fs::exists(opts.out)) fs::remove(opts.out);

  std::vector<std::vector<long>> class_rows(pool.n_classes);
  for (long i = 0; i < pool.n(); ++i) class_rows[pool.y[i]].push_back(i);

  int emitted = 0;
  for (int k = 0; k < opts.n_clients; ++k) {
    Rng g = rng::derive_stream(opts.seed,
                               {0x626f756e64ULL, static_cast<std::uint64_t>(k)});
    const int ca = static_cast<int>(g() % pool.n_classes);
    int cb = static_cast<int>(g() % (pool.n_classes - 1));
    if (cb >= ca) ++cb;

    std::vector<long> rows_a = class_rows[ca], rows_b = class_rows[cb];
    for (std::size_t i = rows_a.size(); i > 1; --i) {
      std::swap(rows_a[i - 1], rows_a[g() % i]);
    }
    for (std::size_t i = rows_b.size(); i > 1; --i) {
      std::swap(rows_b[i - 1], rows_b[g() % i]);
    }

    for (long n_train : opts.train_sizes) {
      const long per_class = n_train / 2;
      const long test_per_class = opts.test_size / 2;
      if (per_class + test_per_class > static_cast<long>(rows_a.size()) ||
          per_class + test_per_class > static_cast<long>(rows_b.size())) {
        throw std::invalid_argument("bound: pool too small for train size " +
                                    std::to_string(n_train));
      }
      Eigen::MatrixXd Xtr(2 * per_class, pool.dim());
      Eigen::VectorXi ytr(2 * per_class);
      Eigen::MatrixXd Xte(2 * test_per_class, pool.dim());
      Eigen::VectorXi yte(2 * test_per_class);
      for (long i = 0; i < per_class; ++i) {
        Xtr.row(i) = pool.X.row(rows_a[i]);
        ytr[i] = 0;
        Xtr.row(per_class + i) = pool.X.row(rows_b[i]);
        ytr[per_class + i] = 1;
      }
      for (long i = 0; i < test_per_class; ++i) {
        Xte.row(i) = pool.X.row(rows_a[per_class + i]);
        yte[i] = 0;
        Xte.row(test_per_class + i) = pool.X.row(rows_b[per_class + i]);
        yte[test_per_class + i] = 1;
      }

      const Eigen::MatrixXd Etr = embed(server.theta, Xtr);
      const Eigen::MatrixXd Ete = embed(server.theta, Xte);
      const Eigen::MatrixXd K = gram_self(server.kernel, Etr).materialize();
      const Eigen::MatrixXd Kstar = gram(server.kernel, Etr, Ete);
      const Eigen::VectorXd kss = Eigen::VectorXd::Constant(
          Ete.rows(), gram_diag_value(server.kernel));

      const BoundReport rep = bound_report(K, ytr, Kstar, kss, yte,
                                           opts.delta, opts.budgets, g);
      json rec;
      rec["client"] = k;
      rec["classes"] = {ca, cb};
      rec["n_train"] = rep.n_train;
      rec["n_test"] = rep.n_test;
      rec["delta"] = rep.delta;
      rec["empirical_gibbs_risk"] = rep.empirical_gibbs_risk;
      rec["test_gibbs_risk"] = rep.test_gibbs_risk;
      rec["empirical_bayes_risk"] = rep.empirical_bayes_risk;
      rec["test_bayes_risk"] = rep.test_bayes_risk;
      rec["kl"] = rep.kl;
      rec["kl_stderr"] = rep.kl_stderr;
      rec["epsilon"] = rep.epsilon;
      rec["bound"] = rep.bound;
      if (!opts.out.empty()) append_jsonl(opts.out, rec);
      log << "client " << k << " n=" << rep.n_train << " risk "
          << rep.empirical_gibbs_risk << " bound " << rep.bound
          << " test risk " << rep.test_gibbs_risk << "\n";
      ++emitted;
    }
  }
  log << emitted << " bound records\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportOptions {
  std::vector<std::string> inputs;
  std::string out;
};

/// Aggregates results files into mean +- SEM tables over seeds.
inline int cmd_report(const ReportOptions& opts, std::ostream& log) {
  if (opts.inputs.empty()) {
    throw std::invalid_argument("report: no input results files");
  }
  std::vector<double> acc, ece_v, brier_v;
  for (const auto& path : opts.inputs) {
    const json j = read_json_file(path);
    if (j.at("format") != "fedgp-results") {
      throw std::runtime_error("not a results file: " + path);
    }
    acc.push_back(j.at("federated").at("accuracy").get<double>());
    ece_v.push_back(j.at("federated").at("ece").get<double>());
    brier_v.push_back(j.at("federated").at("brier").get<double>());
  }
  const auto mean_sem = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sem = v.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
    return std::pair<double, double>(mean, sem);
  };
  const auto [acc_m, acc_s] = mean_sem(acc);
  const auto [ece_m, ece_s] = mean_sem(ece_v);
  const auto [bri_m, bri_s] = mean_sem(brier_v);

  json summary;
  summary["format"] = "fedgp-summary";
  summary["version"] = 1;
  summary["n_runs"] = opts.inputs.size();
  summary["federated_accuracy"] = {{"mean", acc_m}, {"sem", acc_s}};
  summary["ece"] = {{"mean", ece_m}, {"sem", ece_s}};
  summary["brier"] = {{"mean", bri_m}, {"sem", bri_s}};
  if (!opts.out.empty()) write_json_file(opts.out, summary);

  log << "runs: " << opts.inputs.size() << "\n";
  log << "federated accuracy: " << acc_m << " +- " << acc_s << "\n";
  log << "ece: " << ece_m << " +- " << ece_s << "\n";
  log << "brier: " << bri_m << " +- " << bri_s << "\n";
  return 0;
}

}  // namespace fedgp
