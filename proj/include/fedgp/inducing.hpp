/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "fedgp/rng.hpp"

namespace fedgp {

/// Shared pseudo-inputs in embedding space with fixed class labels spread
/// evenly across classes. Server state: shipped to clients with the
/// network parameters and updated by averaging like them.
struct InducingSet {
  Eigen::MatrixXd X;       // M x embed_dim
  Eigen::VectorXi labels;  // fixed class labels
  int per_class = 0;

  int size() const { return static_cast<int>(labels.size()); }
};

/// Seeds per-class rows at the class embedding means plus Gaussian noise.
inline InducingSet init_inducing_set(const Eigen::MatrixXd& embeddings,
                                     const Eigen::VectorXi& labels,
                                     int n_classes, int per_class,
                                     double noise_scale, Rng& g) {
  if (per_class < 1 || n_classes < 1) {
    throw std::invalid_argument("init_inducing_set: counts must be >= 1");
  }
  const int e = static_cast<int>(embeddings.cols());
  InducingSet set;
  set.per_class = per_class;
  set.X.resize(n_classes * per_class, e);
  set.labels.resize(n_classes * per_class);
  for (int c = 0; c < n_classes; ++c) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(e);
    long count = 0;
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) {
        mean += embeddings.row(i);
        ++count;
      }
    }
    if (count > 0) mean /= static_cast<double>(count);
    for (int r = 0; r < per_class; ++r) {
      const int row = c * per_class + r;
      set.labels[row] = c;
      for (int j = 0; j < e; ++j) {
        set.X(row, j) = mean[j] + noise_scale * rng::normal(g);
      }
    }
  }
  return set;
}

/// Indices of the inducing rows whose class belongs to the node.
inline std::vector<int> route_inducing(const InducingSet& set,
                                       const std::vector<int>& node_classes) {
  std::vector<int> rows;
  for (int i = 0; i < set.size(); ++i) {
    if (std::binary_search(node_classes.begin(), node_classes.end(),
                           set.labels[i])) {
      rows.push_back(i);
    }
  }
  return rows;
}

/// Binary routing labels of inducing rows at a node: an inducing point
/// follows the left/right assignment of its class under the node split.
inline Eigen::VectorXi inducing_binary_labels(
    const InducingSet& set, const std::vector<int>& rows,
    const std::vector<int>& left_classes) {
  Eigen::VectorXi y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    y[static_cast<int>(i)] =
        std::binary_search(left_classes.begin(), left_classes.end(),
                           set.labels[rows[i]])
            ? 1
            : 0;
  }
  return y;
}

/// Conditioning set for one tree node under the shared-pseudo-input
/// strategy: rows and binary routing labels, pseudo rows first.
struct IPConditioning {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  int n_inducing = 0;  // leading rows that came from the shared set
};

/// Training-time conditioning: the routed pseudo-inputs alone stand in as
/// the node's training set; the client's real rows become targets.
inline IPConditioning ipdata_train_conditioning(
    const InducingSet& set, const std::vector<int>& node_classes,
    const std::vector<int>& left_classes) {
  const std::vector<int> rows = route_inducing(set, node_classes);
  if (rows.empty()) {
    throw std::invalid_argument("no inducing rows routed to a tree node");
  }
  IPConditioning out;
  out.n_inducing = static_cast<int>(rows.size());
  out.X.resize(rows.size(), set.X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.X.row(static_cast<int>(i)) = set.X.row(rows[i]);
  }
  out.y = inducing_binary_labels(set, rows, left_classes);
  return out;
}

/// Test-time conditioning: the routed pseudo-inputs concatenated with the
/// client's real node data (which may be empty).
inline IPConditioning ipdata_test_conditioning(
    const InducingSet& set, const std::vector<int>& node_classes,
    const std::vector<int>& left_classes, const Eigen::MatrixXd& client_X,
    const Eigen::VectorXi& client_y) {
  IPConditioning base =
      ipdata_train_conditioning(set, node_classes, left_classes);
  if (client_X.rows() == 0) return base;
  IPConditioning out;
  out.n_inducing = base.n_inducing;
  out.X.resize(base.X.rows() + client_X.rows(), base.X.cols());
  out.X << base.X, client_X;
  out.y.resize(base.y.size() + client_y.size());
  out.y << base.y, client_y;
  return out;
}

/// Observed client class distribution q and conditioning-set class
/// distribution p over the same class index space.
struct ClassRatios {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
};

/// Reweights a class posterior to the client's class ratios:
/// out_i proportional to (q_i / p_i) * posterior_i.
inline Eigen::VectorXd correct_class_ratios(const Eigen::VectorXd& posterior,
                                            const ClassRatios& ratios) {
  if (posterior.size() != ratios.q.size() ||
      posterior.size() != ratios.p.size()) {
    throw std::invalid_argument("correct_class_ratios: size mismatch");
  }
  Eigen::VectorXd out(posterior.size());
  bool identity = true;
  for (Eigen::Index i = 0; i < posterior.size(); ++i) {
    if (posterior[i] > 0.0 && !(ratios.p[i] > 0.0)) {
      throw std::invalid_argument(
          "correct_class_ratios: zero conditioning mass on a supported class");
    }
    const double r = ratios.p[i] > 0.0 ? ratios.q[i] / ratios.p[i] : 0.0;
    if (r != 1.0) identity = false;
    out[i] = r * posterior[i];
  }
  if (identity) return posterior;  // q == p is exactly a no-op
  const double total = out.sum();
  if (!(total > 0.0)) {
    throw std::invalid_argument("correct_class_ratios: zero total mass");
  }
  return out / total;
}

/// Binary reweight of a node's left-branch probability by the collapsed
/// left/right mass ratios.
inline double correct_node_bernoulli(double p_left, double q_left_client,
                                     double p_left_cond) {
  const double q_r = 1.0 - q_left_client;
  const double p_r = 1.0 - p_left_cond;
  if (p_left_cond <= 0.0 || p_r <= 0.0) return p_left;
  const double wl = (q_left_client / p_left_cond) * p_left;
  const double wr = (q_r / p_r) * (1.0 - p_left);
  const double total = wl + wr;
  return total > 0.0 ? wl / total : p_left;
}

}  // namespace fedgp
