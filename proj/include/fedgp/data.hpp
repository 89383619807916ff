/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedgp/rng.hpp"

namespace fedgp {

struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  int n_classes = 0;

  long n() const { return X.rows(); }
  int dim() const { return static_cast<int>(X.cols()); }
};

struct BlobConfig {
  int n_classes = 4;
  int per_class = 100;
  int dim = 8;
  double radius = 5.0;   // class-mean distance from the origin
  double sigma = 1.0;    // within-class standard deviation
  std::uint64_t seed = 1;
};

/// Gaussian blobs with class means on distinct hypercube corners scaled to
/// the radius, so all pairwise mean distances are bounded below.
inline Dataset make_blobs(const BlobConfig& cfg) {
  if (cfg.n_classes < 1 || cfg.per_class < 1 || cfg.dim < 1) {
    throw std::invalid_argument("make_blobs: counts must be >= 1");
  }
  if (cfg.n_classes > (1L << std::min(cfg.dim, 30))) {
    throw std::invalid_argument("make_blobs: need n_classes <= 2^dim");
  }
  Rng g = rng::derive_stream(cfg.seed, {0x626c6f62ULL});
  Dataset ds;
  ds.n_classes = cfg.n_classes;
  ds.X.resize(static_cast<long>(cfg.n_classes) * cfg.per_class, cfg.dim);
  ds.y.resize(ds.X.rows());

  Eigen::MatrixXd means(cfg.n_classes, cfg.dim);
  for (int k = 0; k < cfg.n_classes; ++k) {
    for (int j = 0; j < cfg.dim; ++j) {
      means(k, j) = ((k >> (j % 30)) & 1) ? -1.0 : 1.0;
    }
    means.row(k) *= cfg.radius / means.row(k).norm();
  }
  long r = 0;
  for (int k = 0; k < cfg.n_classes; ++k) {
    for (int i = 0; i < cfg.per_class; ++i, ++r) {
      ds.y[r] = k;
      for (int j = 0; j < cfg.dim; ++j) {
        ds.X(r, j) = means(k, j) + cfg.sigma * rng::normal(g);
      }
    }
  }
  return ds;
}

/// Plain-text dataset format: one header line "n d n_classes", then one
/// row per sample with d feature values and the integer class last,
/// space-separated.
inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.precision(17);
  out << ds.n() << " " << ds.dim() << " " << ds.n_classes << "\n";
  for (long i = 0; i < ds.n(); ++i) {
    for (int j = 0; j < ds.dim(); ++j) out << ds.X(i, j) << " ";
    out << ds.y[i] << "\n";
  }
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  long n = 0;
  int d = 0, classes = 0;
  if (!(in >> n >> d >> classes) || n < 0 || d < 1 || classes < 1) {
    throw std::runtime_error("bad dataset header in " + path);
  }
  Dataset ds;
  ds.n_classes = classes;
  ds.X.resize(n, d);
  ds.y.resize(n);
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      if (!(in >> ds.X(i, j))) {
        throw std::runtime_error("truncated dataset row " + std::to_string(i));
      }
    }
    if (!(in >> ds.y[i]) || ds.y[i] < 0 || ds.y[i] >= classes) {
      throw std::runtime_error("bad label on row " + std::to_string(i));
    }
  }
  if (!ds.X.allFinite()) {
    throw std::runtime_error("non-finite features in " + path);
  }
  return ds;
}

}  // namespace fedgp
