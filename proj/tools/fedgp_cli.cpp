/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

// Experiment driver: dataset generation, client partitioning, federated
// training, evaluation, generalization bounds and cross-seed reports.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fedgp/driver.hpp"

namespace {

/// Loads the config file (when given) and applies CLI overrides on top.
fedgp::RunConfig merged_config(const std::string& config_path,
                               const fedgp::json& overrides) {
  fedgp::json j = fedgp::json::object();
  if (!config_path.empty()) j = fedgp::read_json_file(config_path);
  for (const auto& [key, value] : overrides.items()) j[key] = value;
  return fedgp::parse_run_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personalized federated learning with GP-tree classifiers"};
  app.require_subcommand(1);

  // gen-data -----------------------------------------------------------
  fedgp::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-data", "write a synthetic blob dataset or validate an existing one");
  gen_cmd->add_option("--out", gen.out, "output dataset path");
  gen_cmd->add_option("--validate", gen.validate,
                      "validate this dataset file and exit");
  gen_cmd->add_option("--classes", gen.blobs.n_classes, "number of classes");
  gen_cmd->add_option("--per-class", gen.blobs.per_class, "samples per class");
  gen_cmd->add_option("--dim", gen.blobs.dim, "feature dimension");
  gen_cmd->add_option("--radius", gen.blobs.radius, "class-mean radius");
  gen_cmd->add_option("--sigma", gen.blobs.sigma, "within-class sigma");
  gen_cmd->add_option("--seed", gen.blobs.seed, "generator seed");

  // partition ------------------------------------------------------------
  fedgp::PartitionOptions part;
  auto* part_cmd =
      app.add_subcommand("partition", "materialize client shards + manifest");
  part_cmd->add_option("--data", part.data, "dataset file")->required();
  part_cmd->add_option("--run-dir", part.run_dir, "run directory")->required();
  part_cmd->add_option("--clients", part.partition.n_clients,
                       "number of clients");
  part_cmd->add_option("--classes-per-client",
                       part.partition.classes_per_client,
                       "classes sampled per client");
  part_cmd->add_option("--train-fraction", part.partition.train_fraction,
                       "train split fraction per class");
  part_cmd->add_option("--val-fraction", part.partition.val_fraction,
                       "validation split fraction per class");
  part_cmd->add_option("--seed", part.seed, "partition seed");
  part_cmd->add_option("--noise-model", part.noise_model,
                       "gaussian | dropout | scale_shift");
  part_cmd->add_option("--noise-a", part.noise_a, "first noise parameter");
  part_cmd->add_option("--noise-b", part.noise_b, "second noise parameter");

  // train ----------------------------------------------------------------
  std::string train_run_dir, train_config;
  fedgp::json train_overrides = fedgp::json::object();
  auto* train_cmd =
      app.add_subcommand("train", "run the federation loop (resumable)");
  train_cmd->add_option("--run-dir", train_run_dir, "run directory")
      ->required();
  train_cmd->add_option("--config", train_config, "run config JSON file");
  train_cmd->add_option_function<std::vector<std::string>>(
      "--set",
      [&](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) {
            throw CLI::ValidationError("--set expects key=value");
          }
          const std::string key = kv.substr(0, eq);
          const std::string value = kv.substr(eq + 1);
          try {
            train_overrides[key] = fedgp::json::parse(value);
          } catch (const fedgp::json::exception&) {
            train_overrides[key] = value;  // bare strings
          }
        }
      },
      "config overrides as key=value (repeatable)");

  // evaluate ---------------------------------------------------------------
  fedgp::EvaluateOptions eval;
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "score every client's test split under a checkpoint");
  eval_cmd->add_option("--run-dir", eval.run_dir, "run directory")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint,
                       "checkpoint path (default: latest)");
  eval_cmd->add_option("--out", eval.out, "results JSON path");
  eval_cmd->add_option("--reliability-out", eval.reliability_out,
                       "reliability table path");

  // bound -------------------------------------------------------------------
  fedgp::BoundCmdOptions bound;
  std::vector<long> bound_sizes;
  auto* bound_cmd = app.add_subcommand(
      "bound", "freeze the kernel and bound novel binary clients");
  bound_cmd->add_option("--checkpoint", bound.checkpoint, "checkpoint path")
      ->required();
  bound_cmd->add_option("--data", bound.data, "novel-client sample pool")
      ->required();
  bound_cmd->add_option("--out", bound.out, "bounds JSONL path");
  bound_cmd->add_option("--clients", bound.n_clients, "novel client count");
  bound_cmd->add_option("--train-sizes", bound_sizes,
                        "training-set sizes to sweep");
  bound_cmd->add_option("--test-size", bound.test_size,
                        "test points per client");
  bound_cmd->add_option("--delta", bound.delta, "confidence parameter");
  bound_cmd->add_option("--kl-samples", bound.budgets.kl_samples,
                        "retained joint samples for the KL estimate");
  bound_cmd->add_option("--risk-samples", bound.budgets.risk_samples,
                        "posterior draws for the empirical risk");
  bound_cmd->add_option("--chains", bound.budgets.chains, "gibbs chains");
  bound_cmd->add_option("--seed", bound.seed, "bound protocol seed");

  // report -----------------------------------------------------------------
  fedgp::ReportOptions rep;
  auto* rep_cmd = app.add_subcommand(
      "report", "aggregate results files into mean +- SEM tables");
  rep_cmd->add_option("--inputs", rep.inputs, "results JSON files")
      ->required();
  rep_cmd->add_option("--out", rep.out, "summary JSON path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) return fedgp::cmd_gen_data(gen, std::cout);
    if (part_cmd->parsed()) return fedgp::cmd_partition(part, std::cout);
    if (train_cmd->parsed()) {
      fedgp::TrainCmdOptions opts;
      opts.run_dir = train_run_dir;
      opts.config = merged_config(train_config, train_overrides);
      return fedgp::cmd_train(opts, std::cout);
    }
    if (eval_cmd->parsed()) return fedgp::cmd_evaluate(eval, std::cout);
    if (bound_cmd->parsed()) {
      if (!bound_sizes.empty()) bound.train_sizes = bound_sizes;
      return fedgp::cmd_bound(bound, std::cout);
    }
    if (rep_cmd->parsed()) return fedgp::cmd_report(rep, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
