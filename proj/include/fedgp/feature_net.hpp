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

#include "fedgp/kernel.hpp"
#include "fedgp/rng.hpp"

namespace fedgp {

/// Parameters of the shared feature extractor: an MLP with tanh hidden
/// layers and a linear output layer. This is the object the federation
/// averages.
struct FeatureNetParams {
  std::vector<Eigen::MatrixXd> weights;  // layer l: (out_l x in_l)
  std::vector<Eigen::VectorXd> biases;
  int version = 1;

  int n_layers() const { return static_cast<int>(weights.size()); }
  int input_dim() const {
    return weights.empty() ? 0 : static_cast<int>(weights.front().cols());
  }
  int output_dim() const {
    return weights.empty() ? 0 : static_cast<int>(weights.back().rows());
  }

  std::vector<int> layer_sizes() const {
    std::vector<int> sizes;
    if (weights.empty()) return sizes;
    sizes.push_back(input_dim());
    for (const auto& w : weights) sizes.push_back(static_cast<int>(w.rows()));
    return sizes;
  }

  bool finite() const {
    for (const auto& w : weights) {
      if (!w.allFinite()) return false;
    }
    for (const auto& b : biases) {
      if (!b.allFinite()) return false;
    }
    return true;
  }

  static FeatureNetParams zeros(const std::vector<int>& sizes) {
    if (sizes.size() < 2) {
      throw std::invalid_argument("feature net needs >= 2 layer sizes");
    }
    FeatureNetParams p;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      p.weights.push_back(Eigen::MatrixXd::Zero(sizes[l + 1], sizes[l]));
      p.biases.push_back(Eigen::VectorXd::Zero(sizes[l + 1]));
    }
    return p;
  }

  /// Glorot-uniform initialization.
  static FeatureNetParams init(const std::vector<int>& sizes, Rng& g) {
    FeatureNetParams p = zeros(sizes);
    for (auto& w : p.weights) {
      const double bound = std::sqrt(6.0 / (w.rows() + w.cols()));
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
          w(i, j) = bound * (2.0 * rng::uniform(g) - 1.0);
        }
      }
    }
    return p;
  }
};

inline FeatureNetParams zeros_like(const FeatureNetParams& p) {
  FeatureNetParams out = p;
  for (auto& w : out.weights) w.setZero();
  for (auto& b : out.biases) b.setZero();
  return out;
}

inline void axpy(double alpha, const FeatureNetParams& x, FeatureNetParams& y) {
  for (std::size_t l = 0; l < y.weights.size(); ++l) {
    y.weights[l] += alpha * x.weights[l];
    y.biases[l] += alpha * x.biases[l];
  }
}

inline void scale(FeatureNetParams& p, double alpha) {
  for (auto& w : p.weights) w *= alpha;
  for (auto& b : p.biases) b *= alpha;
}

/// Forward activations cached for reverse mode; layer_inputs[l] is the
/// input of layer l, layer_inputs[n_layers] the final embedding.
struct EmbedCache {
  std::vector<Eigen::MatrixXd> layer_inputs;
};

inline Eigen::MatrixXd embed_forward(const FeatureNetParams& params,
                                     const Eigen::MatrixXd& inputs,
                                     EmbedCache* cache) {
  if (inputs.cols() != params.input_dim()) {
    throw std::invalid_argument("embed: input width does not match net");
  }
  Eigen::MatrixXd h = inputs;
  if (cache) {
    cache->layer_inputs.clear();
    cache->layer_inputs.push_back(h);
  }
  const int n = params.n_layers();
  for (int l = 0; l < n; ++l) {
    Eigen::MatrixXd z = h * params.weights[l].transpose();
    z.rowwise() += params.biases[l].transpose();
    h = (l + 1 < n) ? z.array().tanh().matrix() : z;
    if (cache) cache->layer_inputs.push_back(h);
  }
  return h;
}

/// Rows are g(x_i) under the current parameters.
inline Eigen::MatrixXd embed(const FeatureNetParams& params,
                             const Eigen::MatrixXd& inputs) {
  return embed_forward(params, inputs, nullptr);
}

/// Reverse mode through the MLP: given dObjective/dEmbeddings, accumulates
/// parameter gradients and returns them.
inline FeatureNetParams embed_backward(const FeatureNetParams& params,
                                       const EmbedCache& cache,
                                       const Eigen::MatrixXd& grad_out) {
  const int n = params.n_layers();
  FeatureNetParams grads = zeros_like(params);
  Eigen::MatrixXd g = grad_out;
  for (int l = n - 1; l >= 0; --l) {
    if (l + 1 < n) {
      // tanh' = 1 - h^2 on the cached post-activation
      const Eigen::MatrixXd& h = cache.layer_inputs[l + 1];
      g = (g.array() * (1.0 - h.array().square())).matrix();
    }
    grads.weights[l] += g.transpose() * cache.layer_inputs[l];
    grads.biases[l] += g.colwise().sum().transpose();
    if (l > 0) g = g * params.weights[l];
  }
  return grads;
}

/// Chains an upstream gradient on a self-gram of the embeddings all the way
/// to the network parameters.
inline FeatureNetParams backprop_kernel_objective(
    const FeatureNetParams& params, const KernelConfig& cfg,
    const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& grad_wrt_gram) {
  EmbedCache cache;
  const Eigen::MatrixXd e = embed_forward(params, inputs, &cache);
  const Eigen::MatrixXd k = gram(cfg, e, e);
  const Eigen::MatrixXd de = gram_self_backward(cfg, e, k, grad_wrt_gram);
  return embed_backward(params, cache, de);
}

/// Plain momentum SGD, run in ascent direction (objectives here are
/// log-likelihoods).
struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
};

struct SgdState {
  FeatureNetParams velocity;
  bool initialized = false;
};

inline void sgd_ascend(FeatureNetParams& params, const FeatureNetParams& grads,
                       const SgdConfig& cfg, SgdState& state) {
  if (!state.initialized) {
    state.velocity = zeros_like(params);
    state.initialized = true;
  }
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    state.velocity.weights[l] =
        cfg.momentum * state.velocity.weights[l] + grads.weights[l];
    state.velocity.biases[l] =
        cfg.momentum * state.velocity.biases[l] + grads.biases[l];
    params.weights[l] += cfg.learning_rate * state.velocity.weights[l];
    params.biases[l] += cfg.learning_rate * state.velocity.biases[l];
  }
}

}  // namespace fedgp
