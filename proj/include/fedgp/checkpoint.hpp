/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fedgp/federation.hpp"

namespace fedgp {

using json = nlohmann::json;

namespace io_detail {

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (long i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (long j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  const long rows = static_cast<long>(j.size());
  const long cols = rows > 0 ? static_cast<long>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i) {
    if (static_cast<long>(j[i].size()) != cols) {
      throw std::runtime_error("ragged matrix in checkpoint");
    }
    for (long jx = 0; jx < cols; ++jx) m(i, jx) = j[i][jx].get<double>();
  }
  return m;
}

inline json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (long i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<long>(i)] = j[i];
  return v;
}

inline json ivector_to_json(const Eigen::VectorXi& v) {
  json out = json::array();
  for (long i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Eigen::VectorXi ivector_from_json(const json& j) {
  Eigen::VectorXi v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<long>(i)] = j[i];
  return v;
}

}  // namespace io_detail

inline json net_to_json(const FeatureNetParams& p) {
  json j;
  j["version"] = p.version;
  j["sizes"] = p.layer_sizes();
  j["weights"] = json::array();
  j["biases"] = json::array();
  for (const auto& w : p.weights) {
    j["weights"].push_back(io_detail::matrix_to_json(w));
  }
  for (const auto& b : p.biases) {
    j["biases"].push_back(io_detail::vector_to_json(b));
  }
  return j;
}

inline FeatureNetParams net_from_json(const json& j) {
  FeatureNetParams p;
  p.version = j.at("version").get<int>();
  for (const auto& w : j.at("weights")) {
    p.weights.push_back(io_detail::matrix_from_json(w));
  }
  for (const auto& b : j.at("biases")) {
    p.biases.push_back(io_detail::vector_from_json(b));
  }
  if (p.weights.size() != p.biases.size() || !p.finite()) {
    throw std::runtime_error("malformed feature net in checkpoint");
  }
  return p;
}

inline json inducing_to_json(const InducingSet& s) {
  json j;
  j["per_class"] = s.per_class;
  j["labels"] = io_detail::ivector_to_json(s.labels);
  j["X"] = io_detail::matrix_to_json(s.X);
  return j;
}

inline InducingSet inducing_from_json(const json& j) {
  InducingSet s;
  s.per_class = j.at("per_class").get<int>();
  s.labels = io_detail::ivector_from_json(j.at("labels"));
  s.X = io_detail::matrix_from_json(j.at("X"));
  if (s.X.rows() != s.labels.size()) {
    throw std::runtime_error("malformed inducing set in checkpoint");
  }
  return s;
}

inline json gibbs_state_to_json(const GibbsState& s) {
  json j;
  j["steps_between_samples"] = s.steps_between_samples;
  j["chains"] = json::array();
  for (const auto& c : s.chains) {
    j["chains"].push_back({{"f", io_detail::vector_to_json(c.f)},
                           {"omega", io_detail::vector_to_json(c.omega)}});
  }
  return j;
}

inline GibbsState gibbs_state_from_json(const json& j) {
  GibbsState s;
  s.steps_between_samples = j.at("steps_between_samples").get<int>();
  for (const auto& c : j.at("chains")) {
    ChainState chain;
    chain.f = io_detail::vector_from_json(c.at("f"));
    chain.omega = io_detail::vector_from_json(c.at("omega"));
    if ((chain.omega.array() <= 0.0).any()) {
      throw std::runtime_error("non-positive omega in serialized chain");
    }
    s.chains.push_back(std::move(chain));
  }
  return s;
}

/// Versioned per-client model checkpoint: tree topology, per-node class
/// sets and routing, and the per-node sampler states.
inline json tree_model_to_json(const GPTreeModel& tree,
                               const std::vector<GibbsState>& node_states) {
  json j;
  j["format"] = "fedgp-tree-model";
  j["version"] = 1;
  j["class_ids"] = tree.class_ids;
  j["nodes"] = json::array();
  for (const auto& node : tree.nodes) {
    json n;
    n["classes"] = node.classes;
    n["left"] = node.left;
    n["right"] = node.right;
    n["points"] = node.points;
    n["to_left"] = json::array();
    for (char c : node.to_left) n["to_left"].push_back(static_cast<int>(c));
    j["nodes"].push_back(std::move(n));
  }
  j["gibbs"] = json::array();
  for (const auto& s : node_states) j["gibbs"].push_back(gibbs_state_to_json(s));
  return j;
}

inline GPTreeModel tree_model_from_json(const json& j,
                                        std::vector<GibbsState>* node_states) {
  if (j.at("format") != "fedgp-tree-model" || j.at("version").get<int>() != 1) {
    throw std::runtime_error("unsupported tree model format");
  }
  GPTreeModel tree;
  tree.class_ids = j.at("class_ids").get<std::vector<int>>();
  for (const auto& n : j.at("nodes")) {
    TreeNode node;
    node.classes = n.at("classes").get<std::vector<int>>();
    node.left = n.at("left").get<int>();
    node.right = n.at("right").get<int>();
    node.points = n.at("points").get<std::vector<int>>();
    for (const auto& c : n.at("to_left")) {
      node.to_left.push_back(static_cast<char>(c.get<int>()));
    }
    tree.nodes.push_back(std::move(node));
  }
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (tree.nodes[i].is_leaf() && tree.nodes[i].classes.size() == 1) {
      tree.leaf_of_class[tree.nodes[i].classes[0]] = static_cast<int>(i);
    }
  }
  if (node_states) {
    node_states->clear();
    for (const auto& s : j.at("gibbs")) {
      node_states->push_back(gibbs_state_from_json(s));
    }
  }
  return tree;
}

inline constexpr int kCheckpointVersion = 1;

/// Versioned server-state checkpoint; `config_echo` makes the run
/// directory self-describing.
inline json checkpoint_to_json(const ServerState& server,
                               const json& config_echo) {
  json j;
  j["format"] = "fedgp-checkpoint";
  j["version"] = kCheckpointVersion;
  j["round"] = server.round;
  j["kernel"] = {{"length_scale", server.kernel.length_scale},
                 {"output_scale", server.kernel.output_scale}};
  j["net"] = net_to_json(server.theta);
  j["inducing"] = server.inducing ? inducing_to_json(*server.inducing)
                                  : json(nullptr);
  j["config"] = config_echo;
  return j;
}

inline ServerState checkpoint_from_json(const json& j, json* config_echo) {
  if (j.at("format") != "fedgp-checkpoint" ||
      j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint format");
  }
  ServerState server;
  server.round = j.at("round").get<int>();
  server.kernel.length_scale = j.at("kernel").at("length_scale");
  server.kernel.output_scale = j.at("kernel").at("output_scale");
  server.theta = net_from_json(j.at("net"));
  if (!j.at("inducing").is_null()) {
    server.inducing = inducing_from_json(j.at("inducing"));
  }
  if (config_echo) *config_echo = j.value("config", json::object());
  return server;
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  json j;
  in >> j;
  return j;
}

inline void append_jsonl(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open for append: " + path);
  out << j.dump() << "\n";
}

inline json eval_report_to_json(const EvalReport& report) {
  json j;
  j["format"] = "fedgp-results";
  j["version"] = 1;
  j["federated"] = {{"accuracy", report.federated_accuracy},
                    {"ece", report.federated_ece},
                    {"mce", report.federated_mce},
                    {"brier", report.federated_brier},
                    {"n_samples", report.total_samples}};
  j["clients"] = json::array();
  for (const auto& c : report.clients) {
    j["clients"].push_back({{"id", c.id},
                            {"n_test", c.n_test},
                            {"accuracy", c.accuracy},
                            {"ece", c.ece},
                            {"mce", c.mce},
                            {"brier", c.brier}});
  }
  return j;
}

inline void write_reliability(const std::string& path,
                              const std::vector<ReliabilityBin>& bins) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.precision(17);
  out << "# fedgp-reliability v1: bin_center accuracy confidence count\n";
  for (const auto& b : bins) {
    out << b.bin_center << " " << b.accuracy << " " << b.confidence << " "
        << b.count << "\n";
  }
}

}  // namespace fedgp
