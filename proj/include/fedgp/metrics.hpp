/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace fedgp {

namespace metrics_detail {
inline int bin_index(double confidence, int n_bins) {
  const int b = static_cast<int>(confidence * n_bins);
  return std::clamp(b, 0, n_bins - 1);
}

struct BinTotals {
  std::vector<double> conf_sum, correct_sum;
  std::vector<long> count;
};

inline BinTotals accumulate(const std::vector<double>& confidences,
                            const std::vector<bool>& correctness,
                            int n_bins) {
  if (confidences.empty()) {
    throw std::invalid_argument("calibration metrics need at least one sample");
  }
  if (confidences.size() != correctness.size()) {
    throw std::invalid_argument("confidences/correctness size mismatch");
  }
  if (n_bins < 1) throw std::invalid_argument("n_bins must be >= 1");
  BinTotals t;
  t.conf_sum.assign(n_bins, 0.0);
  t.correct_sum.assign(n_bins, 0.0);
  t.count.assign(n_bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (c < 0.0 || c > 1.0) {
      throw std::invalid_argument("confidences must lie in [0, 1]");
    }
    const int b = bin_index(c, n_bins);
    t.conf_sum[b] += c;
    t.correct_sum[b] += correctness[i] ? 1.0 : 0.0;
    t.count[b] += 1;
  }
  return t;
}
}  // namespace metrics_detail

/// Expected calibration error over equal-width confidence bins.
inline double ece(const std::vector<double>& confidences,
                  const std::vector<bool>& correctness, int n_bins = 10) {
  const auto t = metrics_detail::accumulate(confidences, correctness, n_bins);
  const double n = static_cast<double>(confidences.size());
  double acc = 0.0;
  for (int b = 0; b < n_bins; ++b) {
    if (t.count[b] == 0) continue;
    const double gap =
        std::abs(t.correct_sum[b] / t.count[b] - t.conf_sum[b] / t.count[b]);
    acc += (t.count[b] / n) * gap;
  }
  return acc;
}

/// Maximum calibration error: the worst bin gap instead of the average.
inline double mce(const std::vector<double>& confidences,
                  const std::vector<bool>& correctness, int n_bins = 10) {
  const auto t = metrics_detail::accumulate(confidences, correctness, n_bins);
  double worst = 0.0;
  for (int b = 0; b < n_bins; ++b) {
    if (t.count[b] == 0) continue;
    worst = std::max(worst, std::abs(t.correct_sum[b] / t.count[b] -
                                     t.conf_sum[b] / t.count[b]));
  }
  return worst;
}

/// Mean squared distance between probability rows and one-hot labels.
inline double brier(const Eigen::MatrixXd& prob_rows,
                    const Eigen::VectorXi& labels) {
  if (prob_rows.rows() == 0) {
    throw std::invalid_argument("brier needs at least one sample");
  }
  if (prob_rows.rows() != labels.size()) {
    throw std::invalid_argument("brier: rows/labels size mismatch");
  }
  double acc = 0.0;
  for (Eigen::Index i = 0; i < prob_rows.rows(); ++i) {
    if (labels[i] < 0 || labels[i] >= prob_rows.cols()) {
      throw std::invalid_argument("brier: label outside probability row");
    }
    for (Eigen::Index j = 0; j < prob_rows.cols(); ++j) {
      const double target = (j == labels[i]) ? 1.0 : 0.0;
      const double d = prob_rows(i, j) - target;
      acc += d * d;
    }
  }
  return acc / static_cast<double>(prob_rows.rows());
}

struct ReliabilityBin {
  double bin_center = 0.0;
  double accuracy = 0.0;
  double confidence = 0.0;
  long count = 0;
};

/// Plot-ready reliability diagram rows; empty bins carry zero counts.
inline std::vector<ReliabilityBin> reliability_export(
    const std::vector<double>& confidences,
    const std::vector<bool>& correctness, int n_bins = 10) {
  const auto t = metrics_detail::accumulate(confidences, correctness, n_bins);
  std::vector<ReliabilityBin> bins(n_bins);
  for (int b = 0; b < n_bins; ++b) {
    bins[b].bin_center = (b + 0.5) / n_bins;
    bins[b].count = t.count[b];
    if (t.count[b] > 0) {
      bins[b].accuracy = t.correct_sum[b] / t.count[b];
      bins[b].confidence = t.conf_sum[b] / t.count[b];
    }
  }
  return bins;
}

}  // namespace fedgp
