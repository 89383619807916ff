/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <map>
#include <memory>
#include <stdexcept>
#include <vector>

#include "fedgp/feature_net.hpp"
#include "fedgp/fitc_node.hpp"
#include "fedgp/gauss_hermite.hpp"
#include "fedgp/gpc_node.hpp"
#include "fedgp/inducing.hpp"
#include "fedgp/kernel.hpp"
#include "fedgp/rng.hpp"

namespace fedgp {

enum class Variant { exact, ip_data, ip_compute };
enum class ObjectiveKind { marginal, predictive };
enum class CorrectionMode { off, node, leaf };

struct TreeNode {
  std::vector<int> classes;  // sorted class ids reaching this node
  int left = -1;
  int right = -1;
  std::vector<int> points;    // client train rows routed here
  std::vector<char> to_left;  // per routed point: class sits in left child

  bool is_leaf() const { return left < 0; }
};

/// Per-client binary reduction of the multiclass problem: every class owns
/// one leaf, each internal node carries a binary GP decision.
struct GPTreeModel {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<int> class_ids;   // classes present, sorted
  std::map<int, int> leaf_of_class;

  std::vector<int> internal_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
      if (!nodes[i].is_leaf()) out.push_back(i);
    }
    return out;
  }
};

namespace tree_detail {

/// 2-means++ split of prototype rows; returns a 0/1 assignment. Degenerate
/// geometry (all prototypes equal) falls back to an index split.
inline std::vector<int> two_means_pp(const Eigen::MatrixXd& protos, Rng& g) {
  const int p = static_cast<int>(protos.rows());
  std::vector<int> assign(p, 0);
  if (p <= 1) return assign;

  const int first = static_cast<int>(g() % p);
  Eigen::VectorXd d2(p);
  for (int i = 0; i < p; ++i) {
    d2[i] = (protos.row(i) - protos.row(first)).squaredNorm();
  }
  int second = -1;
  const double total = d2.sum();
  if (total <= 0.0) {
    for (int i = 0; i < p; ++i) assign[i] = i < (p + 1) / 2 ? 0 : 1;
    return assign;
  }
  double pick = rng::uniform(g) * total;
  for (int i = 0; i < p; ++i) {
    pick -= d2[i];
    if (pick <= 0.0) {
      second = i;
      break;
    }
  }
  if (second < 0 || second == first) second = (first + 1) % p;

  Eigen::RowVectorXd c0 = protos.row(first), c1 = protos.row(second);
  for (int iter = 0; iter < 50; ++iter) {
    bool changed = false;
    for (int i = 0; i < p; ++i) {
      const int want = (protos.row(i) - c0).squaredNorm() <=
                               (protos.row(i) - c1).squaredNorm()
                           ? 0
                           : 1;
      if (want != assign[i]) {
        assign[i] = want;
        changed = true;
      }
    }
    int n0 = 0;
    for (int i = 0; i < p; ++i) n0 += assign[i] == 0 ? 1 : 0;
    if (n0 == 0 || n0 == p) {
      // move the farthest point from the filled cluster into the empty one
      int far = 0;
      double best = -1.0;
      const Eigen::RowVectorXd& c = n0 == 0 ? c1 : c0;
      for (int i = 0; i < p; ++i) {
        const double d = (protos.row(i) - c).squaredNorm();
        if (d > best) {
          best = d;
          far = i;
        }
      }
      assign[far] = n0 == 0 ? 0 : 1;
    }
    c0.setZero();
    c1.setZero();
    int k0 = 0, k1 = 0;
    for (int i = 0; i < p; ++i) {
      if (assign[i] == 0) {
        c0 += protos.row(i);
        ++k0;
      } else {
        c1 += protos.row(i);
        ++k1;
      }
    }
    c0 /= std::max(1, k0);
    c1 /= std::max(1, k1);
    if (!changed && iter > 0) break;
  }
  return assign;
}

inline int build_recursive(GPTreeModel& model, const Eigen::MatrixXd& protos,
                           const std::vector<int>& class_ids,
                           const std::vector<int>& members, Rng& g) {
  const int idx = static_cast<int>(model.nodes.size());
  model.nodes.emplace_back();
  model.nodes[idx].classes.reserve(members.size());
  for (int m : members) model.nodes[idx].classes.push_back(class_ids[m]);

  if (members.size() == 1) {
    model.leaf_of_class[class_ids[members[0]]] = idx;
    return idx;
  }

  Eigen::MatrixXd sub(members.size(), protos.cols());
  for (std::size_t i = 0; i < members.size(); ++i) {
    sub.row(static_cast<int>(i)) = protos.row(members[i]);
  }
  const std::vector<int> assign = two_means_pp(sub, g);

  // the cluster holding the smallest class id goes left
  const int left_cluster = assign[0];
  std::vector<int> lm, rm;
  for (std::size_t i = 0; i < members.size(); ++i) {
    (assign[i] == left_cluster ? lm : rm).push_back(members[i]);
  }
  const int l = build_recursive(model, protos, class_ids, lm, g);
  const int r = build_recursive(model, protos, class_ids, rm, g);
  model.nodes[idx].left = l;
  model.nodes[idx].right = r;
  return idx;
}

}  // namespace tree_detail

/// Builds the per-client tree: per-class prototypes (embedding means),
/// recursive 2-means++ splits down to singleton leaves, then routes every
/// train point through the internal nodes. Deterministic given the rng.
inline GPTreeModel build_tree(const Eigen::MatrixXd& embeddings,
                              const Eigen::VectorXi& labels, Rng& g) {
  if (embeddings.rows() != labels.size() || labels.size() == 0) {
    throw std::invalid_argument("build_tree: bad inputs");
  }
  GPTreeModel model;
  std::vector<int> class_ids;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (!std::binary_search(class_ids.begin(), class_ids.end(), labels[i])) {
      class_ids.insert(
          std::lower_bound(class_ids.begin(), class_ids.end(), labels[i]),
          labels[i]);
    }
  }
  model.class_ids = class_ids;

  const int t = static_cast<int>(class_ids.size());
  Eigen::MatrixXd protos = Eigen::MatrixXd::Zero(t, embeddings.cols());
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(t);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int c = static_cast<int>(
        std::lower_bound(class_ids.begin(), class_ids.end(), labels[i]) -
        class_ids.begin());
    protos.row(c) += embeddings.row(i);
    counts[c] += 1.0;
  }
  for (int c = 0; c < t; ++c) protos.row(c) /= counts[c];

  std::vector<int> all(t);
  for (int c = 0; c < t; ++c) all[c] = c;
  tree_detail::build_recursive(model, protos, class_ids, all, g);

  // route points through internal nodes
  for (auto& node : model.nodes) {
    if (node.is_leaf()) continue;
    const auto& left_classes = model.nodes[node.left].classes;
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
      if (!std::binary_search(node.classes.begin(), node.classes.end(),
                              labels[i])) {
        continue;
      }
      node.points.push_back(static_cast<int>(i));
      node.to_left.push_back(std::binary_search(left_classes.begin(),
                                                left_classes.end(), labels[i])
                                 ? 1
                                 : 0);
    }
  }
  return model;
}

struct TrainOptions {
  Variant variant = Variant::exact;
  ObjectiveKind objective = ObjectiveKind::predictive;
  double holdout_fraction = 0.5;
  double loss_scale = 1.0;
  CorrectionMode correction = CorrectionMode::node;
  bool combine_at_test = true;
  bool resample_test_omega = false;
};

/// Frozen randomness of one local objective evaluation: the tree, the
/// per-node conditioning/target row sets, and the retained omega samples.
/// Given the plan, the objective is a deterministic function of the
/// network parameters and the pseudo-inputs.
struct LocalStepPlan {
  GPTreeModel tree;

  struct NodePlan {
    bool skip = false;           // degenerate node, no GP decision
    bool use_marginal = false;   // marginal kind or documented fallback
    std::vector<int> inducing_rows;
    std::vector<int> cond_rows;    // client rows in the conditioning set
    Eigen::VectorXi cond_labels;   // routing labels of the conditioning set
    std::vector<int> target_rows;  // client rows scored by the predictive kind
    Eigen::VectorXi target_labels;
    std::vector<Eigen::VectorXd> omegas;  // retained samples, one per chain
  };
  std::vector<NodePlan> node_plans;  // aligned with tree.nodes
};

namespace tree_detail {

/// Stratified split by routing label; keeps ceil(fraction * count) per label
/// in the conditioning part, at least one of each.
inline void split_node_points(const std::vector<int>& points,
                              const std::vector<char>& to_left,
                              double keep_fraction, Rng& g,
                              std::vector<int>& kept,
                              std::vector<int>& holdout,
                              std::vector<char>& kept_labels,
                              std::vector<char>& holdout_labels) {
  for (int side = 0; side < 2; ++side) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if ((to_left[i] == 1) == (side == 1)) idx.push_back(static_cast<int>(i));
    }
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[g() % i]);
    }
    std::size_t n_keep = static_cast<std::size_t>(
        std::ceil(keep_fraction * static_cast<double>(idx.size())));
    n_keep = std::clamp<std::size_t>(n_keep, 1, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < n_keep) {
        kept.push_back(points[idx[i]]);
        kept_labels.push_back(to_left[idx[i]]);
      } else {
        holdout.push_back(points[idx[i]]);
        holdout_labels.push_back(to_left[idx[i]]);
      }
    }
  }
}

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m,
                                   const std::vector<int>& rows) {
  Eigen::MatrixXd out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<int>(i)) = m.row(rows[i]);
  }
  return out;
}

inline Eigen::VectorXi to_vectorxi(const std::vector<char>& v) {
  Eigen::VectorXi out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<int>(i)] = v[i];
  return out;
}

inline bool both_labels(const Eigen::VectorXi& y) {
  if (y.size() == 0) return false;
  return (y.array() == y[0]).all() ? false : true;
}

}  // namespace tree_detail

/// Samples the frozen randomness of one local step under the current
/// parameters: rebuilds the tree, draws the per-node splits and runs the
/// Gibbs chains whose final retained samples feed the gradient estimator.
inline LocalStepPlan plan_local_step(const FeatureNetParams& theta,
                                     const InducingSet* inducing,
                                     const KernelConfig& kernel,
                                     const Eigen::MatrixXd& X,
                                     const Eigen::VectorXi& y,
                                     const TrainOptions& opts,
                                     const GibbsConfig& gibbs, Rng& g) {
  gibbs.validate();
  if ((opts.variant == Variant::ip_data || opts.variant == Variant::ip_compute) &&
      inducing == nullptr) {
    throw std::invalid_argument("inducing-point variant without inducing set");
  }
  if (opts.variant == Variant::ip_data &&
      opts.objective == ObjectiveKind::marginal) {
    throw std::invalid_argument(
        "the inducing-data variant trains with the predictive objective only");
  }

  LocalStepPlan plan;
  const Eigen::MatrixXd E = embed(theta, X);
  plan.tree = build_tree(E, y, g);
  plan.node_plans.resize(plan.tree.nodes.size());

  for (std::size_t v = 0; v < plan.tree.nodes.size(); ++v) {
    const TreeNode& node = plan.tree.nodes[v];
    if (node.is_leaf()) {
      plan.node_plans[v].skip = true;
      continue;
    }
    LocalStepPlan::NodePlan& np = plan.node_plans[v];

    const Eigen::VectorXi node_labels = tree_detail::to_vectorxi(node.to_left);
    if (!tree_detail::both_labels(node_labels)) {
      np.skip = true;  // degenerate: the node carries no decision
      continue;
    }

    const auto& left_classes = plan.tree.nodes[node.left].classes;

    if (opts.variant == Variant::ip_data) {
      np.inducing_rows = route_inducing(*inducing, node.classes);
      if (np.inducing_rows.empty()) {
        throw std::invalid_argument("no inducing rows routed to a tree node");
      }
      np.cond_labels =
          inducing_binary_labels(*inducing, np.inducing_rows, left_classes);
      np.target_rows = node.points;
      np.target_labels = node_labels;
      const Eigen::MatrixXd cx =
          tree_detail::gather_rows(inducing->X, np.inducing_rows);
      const Eigen::MatrixXd K = gram_self(kernel, cx).materialize();
      Rng cg(g());
      const auto samples =
          run_chains(K, np.cond_labels, gibbs.train_chains, gibbs.burn_in,
                     gibbs.steps_between_samples, 1, cg);
      for (const auto& s : samples) np.omegas.push_back(s.omega);
      continue;
    }

    // exact and ip_compute condition on client data at this node
    bool use_marginal = opts.objective == ObjectiveKind::marginal;
    std::vector<int> kept = node.points;
    std::vector<char> kept_labels = node.to_left;
    if (!use_marginal) {
      int n_left = 0;
      for (char c : node.to_left) n_left += c;
      const int n_right = static_cast<int>(node.to_left.size()) - n_left;
      if (n_left < 2 || n_right < 2 ||
          opts.holdout_fraction >= 1.0 - 1e-12) {
        use_marginal = true;  // documented fallback, not an error
      } else {
        kept.clear();
        kept_labels.clear();
        std::vector<char> hold_labels;
        tree_detail::split_node_points(node.points, node.to_left,
                                       1.0 - opts.holdout_fraction, g, kept,
                                       np.target_rows, kept_labels,
                                       hold_labels);
        np.target_labels = tree_detail::to_vectorxi(hold_labels);
        if (np.target_rows.empty() ||
            !tree_detail::both_labels(
                tree_detail::to_vectorxi(kept_labels))) {
          use_marginal = true;
          kept = node.points;
          kept_labels = node.to_left;
          np.target_rows.clear();
          np.target_labels.resize(0);
        }
      }
    }
    np.use_marginal = use_marginal;
    np.cond_rows = kept;
    np.cond_labels = tree_detail::to_vectorxi(kept_labels);

    const Eigen::MatrixXd cx = tree_detail::gather_rows(E, np.cond_rows);
    Rng cg(g());
    if (opts.variant == Variant::exact) {
      const Eigen::MatrixXd K = gram_self(kernel, cx).materialize();
      const auto samples =
          run_chains(K, np.cond_labels, gibbs.train_chains, gibbs.burn_in,
                     gibbs.steps_between_samples, 1, cg);
      for (const auto& s : samples) np.omegas.push_back(s.omega);
    } else {
      np.inducing_rows = route_inducing(*inducing, node.classes);
      if (np.inducing_rows.empty()) {
        throw std::invalid_argument("no inducing rows routed to a tree node");
      }
      const Eigen::MatrixXd xb =
          tree_detail::gather_rows(inducing->X, np.inducing_rows);
      const Eigen::MatrixXd Kmm = gram_self(kernel, xb).materialize();
      const Eigen::MatrixXd Knm = gram(kernel, cx, xb);
      const Eigen::VectorXd knn =
          Eigen::VectorXd::Constant(cx.rows(), gram_diag_value(kernel));
      const auto samples = fitc_run_chains(
          Kmm, Knm, knn, np.cond_labels, gibbs.train_chains, gibbs.burn_in,
          gibbs.steps_between_samples, 1, cg);
      for (const auto& s : samples) np.omegas.push_back(s.omega);
    }
  }
  return plan;
}

struct ObjectiveGrad {
  double value = 0.0;
  FeatureNetParams dtheta;
  Eigen::MatrixXd dxbar;  // empty for the exact variant
};

/// Evaluates the training objective and its gradients under a frozen plan.
/// Pure in (theta, inducing): repeated calls with the same plan and inputs
/// return identical values, which is what the finite-difference gradient
/// checks exercise.
inline ObjectiveGrad eval_objective(const FeatureNetParams& theta,
                                    const InducingSet* inducing,
                                    const KernelConfig& kernel,
                                    const Eigen::MatrixXd& X,
                                    const LocalStepPlan& plan,
                                    const TrainOptions& opts,
                                    const GibbsConfig& gibbs) {
  ObjectiveGrad out;
  out.dtheta = zeros_like(theta);
  if (inducing) {
    out.dxbar = Eigen::MatrixXd::Zero(inducing->X.rows(), inducing->X.cols());
  }

  EmbedCache cache;
  const Eigen::MatrixXd E = embed_forward(theta, X, &cache);
  Eigen::MatrixXd dE = Eigen::MatrixXd::Zero(E.rows(), E.cols());
  const double kss = gram_diag_value(kernel);

  for (std::size_t v = 0; v < plan.tree.nodes.size(); ++v) {
    const auto& np = plan.node_plans[v];
    if (np.skip) continue;
    const double w = 1.0 / static_cast<double>(np.omegas.size());

    if (opts.variant != Variant::ip_compute) {
      // dense conditioning: client rows (exact) or pseudo-inputs (ip_data)
      const bool cond_is_inducing = opts.variant == Variant::ip_data;
      const Eigen::MatrixXd cx =
          cond_is_inducing
              ? tree_detail::gather_rows(inducing->X, np.inducing_rows)
              : tree_detail::gather_rows(E, np.cond_rows);
      const GramMatrix gm = gram_self(kernel, cx);
      const Eigen::MatrixXd K = gm.materialize();
      const int nc = static_cast<int>(cx.rows());

      Eigen::MatrixXd dK = Eigen::MatrixXd::Zero(nc, nc);
      Eigen::MatrixXd targets;
      Eigen::MatrixXd kstars;       // nc x n_targets
      Eigen::MatrixXd dkstars;
      if (!np.use_marginal) {
        targets = tree_detail::gather_rows(E, np.target_rows);
        kstars = gram(kernel, cx, targets);
        dkstars = Eigen::MatrixXd::Zero(nc, targets.rows());
      }

      for (const auto& omega : np.omegas) {
        const NodePosterior post(K, np.cond_labels, omega);
        if (np.use_marginal) {
          out.value += w * post.marginal_loglik();
          dK += w * post.marginal_loglik_grad_K();
          continue;
        }
        for (Eigen::Index t = 0; t < targets.rows(); ++t) {
          const Eigen::VectorXd ks = kstars.col(t);
          const auto pred = post.predict(ks, kss);
          const auto pm =
              logistic_gaussian_moments(pred.mu, pred.var, gibbs.gh_degree);
          const bool left = np.target_labels[t] == 1;
          const double pb = std::clamp(pm.p, 1e-12, 1.0 - 1e-12);
          const double p_used = left ? pb : 1.0 - pb;
          out.value += w * std::log(p_used);
          const double sign = left ? 1.0 : -1.0;
          const double gmu = w * sign * pm.dmu / p_used;
          const double gvar = w * sign * pm.dvar / p_used;
          Eigen::VectorXd dks = Eigen::VectorXd::Zero(nc);
          post.predict_backward(ks, gmu, gvar, dK, dks);
          dkstars.col(t) += dks;
        }
      }

      Eigen::MatrixXd dcx = gram_self_backward(kernel, cx, gm.values, dK);
      if (!np.use_marginal) {
        Eigen::MatrixXd dtargets =
            Eigen::MatrixXd::Zero(targets.rows(), targets.cols());
        gram_backward(kernel, cx, targets, kstars,
                      dkstars, dcx, dtargets);
        for (std::size_t t = 0; t < np.target_rows.size(); ++t) {
          dE.row(np.target_rows[t]) += dtargets.row(static_cast<int>(t));
        }
      }
      if (cond_is_inducing) {
        for (std::size_t i = 0; i < np.inducing_rows.size(); ++i) {
          out.dxbar.row(np.inducing_rows[i]) += dcx.row(static_cast<int>(i));
        }
      } else {
        for (std::size_t i = 0; i < np.cond_rows.size(); ++i) {
          dE.row(np.cond_rows[i]) += dcx.row(static_cast<int>(i));
        }
      }
      continue;
    }

    // ip_compute: sparse conditional on the routed pseudo-inputs
    const Eigen::MatrixXd xb =
        tree_detail::gather_rows(inducing->X, np.inducing_rows);
    const Eigen::MatrixXd cx = tree_detail::gather_rows(E, np.cond_rows);
    const GramMatrix gmm = gram_self(kernel, xb);
    const Eigen::MatrixXd Kmm = gmm.materialize();
    const Eigen::MatrixXd Knm = gram(kernel, cx, xb);
    const Eigen::VectorXd knn = Eigen::VectorXd::Constant(cx.rows(), kss);
    const int m = static_cast<int>(xb.rows());

    Eigen::MatrixXd dKmm = Eigen::MatrixXd::Zero(m, m);
    Eigen::MatrixXd dKnm = Eigen::MatrixXd::Zero(cx.rows(), m);
    Eigen::MatrixXd targets;
    Eigen::MatrixXd kstars;
    Eigen::MatrixXd dkstars;
    if (!np.use_marginal) {
      targets = tree_detail::gather_rows(E, np.target_rows);
      kstars = gram(kernel, xb, targets);
      dkstars = Eigen::MatrixXd::Zero(m, targets.rows());
    }

    for (const auto& omega : np.omegas) {
      const FitcFactors factors(Kmm, Knm, knn, np.cond_labels, omega);
      if (np.use_marginal) {
        const auto grads = factors.marginal_grads();
        out.value += w * grads.value;
        dKmm += w * grads.dKmm;
        dKnm += w * grads.dKnm;
        continue;
      }
      auto acc = factors.make_predict_backward();
      for (Eigen::Index t = 0; t < targets.rows(); ++t) {
        const Eigen::VectorXd ks = kstars.col(t);
        const auto pred = factors.predict(ks, kss);
        const auto pm =
            logistic_gaussian_moments(pred.mu, pred.var, gibbs.gh_degree);
        const bool left = np.target_labels[t] == 1;
        const double pb = std::clamp(pm.p, 1e-12, 1.0 - 1e-12);
        const double p_used = left ? pb : 1.0 - pb;
        out.value += w * std::log(p_used);
        const double sign = left ? 1.0 : -1.0;
        const double gmu = w * sign * pm.dmu / p_used;
        const double gvar = w * sign * pm.dvar / p_used;
        dkstars.col(t) += factors.predict_backward_point(ks, gmu, gvar, acc);
      }
      const auto grads = factors.finalize_predict_backward(acc);
      dKmm += grads.dKmm;
      dKnm += grads.dKnm;
    }

    Eigen::MatrixXd dxb = gram_self_backward(kernel, xb, gmm.values, dKmm);
    Eigen::MatrixXd dcx = Eigen::MatrixXd::Zero(cx.rows(), cx.cols());
    gram_backward(kernel, cx, xb, Knm, dKnm, dcx, dxb);
    if (!np.use_marginal) {
      Eigen::MatrixXd dtargets =
          Eigen::MatrixXd::Zero(targets.rows(), targets.cols());
      gram_backward(kernel, xb, targets, kstars, dkstars, dxb, dtargets);
      for (std::size_t t = 0; t < np.target_rows.size(); ++t) {
        dE.row(np.target_rows[t]) += dtargets.row(static_cast<int>(t));
      }
    }
    for (std::size_t i = 0; i < np.cond_rows.size(); ++i) {
      dE.row(np.cond_rows[i]) += dcx.row(static_cast<int>(i));
    }
    for (std::size_t i = 0; i < np.inducing_rows.size(); ++i) {
      out.dxbar.row(np.inducing_rows[i]) += dxb.row(static_cast<int>(i));
    }
  }

  out.value *= opts.loss_scale;
  out.dtheta = embed_backward(theta, cache, dE);
  scale(out.dtheta, opts.loss_scale);
  if (out.dxbar.size() > 0) out.dxbar *= opts.loss_scale;
  return out;
}

/// Plans and evaluates in one call: the spec-level training objective.
inline ObjectiveGrad train_objective(const FeatureNetParams& theta,
                                     const InducingSet* inducing,
                                     const KernelConfig& kernel,
                                     const Eigen::MatrixXd& X,
                                     const Eigen::VectorXi& y,
                                     const TrainOptions& opts,
                                     const GibbsConfig& gibbs, Rng& g) {
  const LocalStepPlan plan =
      plan_local_step(theta, inducing, kernel, X, y, opts, gibbs, g);
  return eval_objective(theta, inducing, kernel, X, plan, opts, gibbs);
}

/// A trained per-client predictor: the personal tree plus per-node
/// posterior state under the current shared parameters.
class ClientModel {
 public:
  ClientModel(const FeatureNetParams& theta, const KernelConfig& kernel,
              const InducingSet* inducing, const Eigen::MatrixXd& X,
              const Eigen::VectorXi& y, const TrainOptions& opts,
              const GibbsConfig& gibbs, Rng& g)
      : theta_(theta), kernel_(kernel), opts_(opts), gibbs_(gibbs) {
    gibbs.validate();
    if (opts.variant != Variant::exact && inducing == nullptr) {
      throw std::invalid_argument("inducing-point variant without inducing set");
    }
    const Eigen::MatrixXd E = embed(theta, X);
    tree_ = build_tree(E, y, g);

    // client class distribution over tree_.class_ids
    q_ = Eigen::VectorXd::Zero(tree_.class_ids.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      q_[class_index(y[i])] += 1.0;
    }
    q_ /= q_.sum();

    p_ = q_;
    if (opts.variant == Variant::ip_data && inducing != nullptr) {
      // conditioning composition: pseudo-labels, plus data when combined
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(tree_.class_ids.size());
      for (int i = 0; i < inducing->size(); ++i) {
        const int c = maybe_class_index(inducing->labels[i]);
        if (c >= 0) counts[c] += 1.0;
      }
      if (opts.combine_at_test) {
        for (Eigen::Index i = 0; i < y.size(); ++i) {
          counts[class_index(y[i])] += 1.0;
        }
      }
      p_ = counts / counts.sum();
    }

    node_states_.resize(tree_.nodes.size());
    for (std::size_t v = 0; v < tree_.nodes.size(); ++v) {
      const TreeNode& node = tree_.nodes[v];
      if (node.is_leaf()) continue;
      NodeState& st = node_states_[v];
      const auto& left_classes = tree_.nodes[node.left].classes;

      double q_left = 0.0, q_node = 0.0;
      for (std::size_t i = 0; i < node.points.size(); ++i) {
        q_node += 1.0;
        q_left += node.to_left[i];
      }
      st.q_left = q_node > 0.0 ? q_left / q_node : 0.5;

      Eigen::VectorXi cond_labels = tree_detail::to_vectorxi(node.to_left);
      Eigen::MatrixXd cond_x = tree_detail::gather_rows(E, node.points);

      if (opts.variant == Variant::ip_data) {
        const IPConditioning cond =
            opts.combine_at_test
                ? ipdata_test_conditioning(*inducing, node.classes,
                                           left_classes, cond_x, cond_labels)
                : ipdata_train_conditioning(*inducing, node.classes,
                                            left_classes);
        cond_x = cond.X;
        cond_labels = cond.y;
        st.p_left =
            cond_labels.size() > 0
                ? cond_labels.cast<double>().sum() / cond_labels.size()
                : 0.5;
      } else {
        st.p_left = st.q_left;
      }

      if (!tree_detail::both_labels(cond_labels)) {
        st.degenerate = true;
        const int observed = cond_labels.size() > 0 ? cond_labels[0] : 1;
        st.left_prob = observed == 1 ? 1.0 - 1e-4 : 1e-4;
        continue;
      }

      if (opts.variant == Variant::ip_compute) {
        const std::vector<int> rows = route_inducing(*inducing, node.classes);
        if (rows.empty()) {
          throw std::invalid_argument("no inducing rows routed to a tree node");
        }
        st.xbar = tree_detail::gather_rows(inducing->X, rows);
        const Eigen::MatrixXd Kmm = gram_self(kernel, st.xbar).materialize();
        const Eigen::MatrixXd Knm = gram(kernel, cond_x, st.xbar);
        const Eigen::VectorXd knn = Eigen::VectorXd::Constant(
            cond_x.rows(), gram_diag_value(kernel));
        st.fitc_Kmm = Kmm;
        st.fitc_Knm = Knm;
        st.fitc_knn = knn;
        st.fitc_labels = cond_labels;
        const auto samples = fitc_run_chains(
            Kmm, Knm, knn, cond_labels, gibbs.test_chains, gibbs.burn_in,
            gibbs.steps_between_samples, 1, g);
        for (const auto& s : samples) {
          st.caches.emplace_back(Kmm, Knm, knn, cond_labels, s.omega);
        }
      } else {
        st.cond_x = cond_x;
        const Eigen::MatrixXd K = gram_self(kernel, cond_x).materialize();
        const auto samples =
            run_chains(K, cond_labels, gibbs.test_chains, gibbs.burn_in,
                       gibbs.steps_between_samples, 1, g);
        for (const auto& s : samples) {
          st.posteriors.emplace_back(K, cond_labels, s.omega);
        }
      }
    }
  }

  const GPTreeModel& tree() const { return tree_; }

  /// Class posterior over tree().class_ids for a raw input row.
  Eigen::VectorXd predict_input(const Eigen::RowVectorXd& x) const {
    return predict_embedded(embed(theta_, x));
  }

  /// Class posterior for an already-embedded row.
  Eigen::VectorXd predict_embedded(const Eigen::RowVectorXd& e) const {
    const int t = static_cast<int>(tree_.class_ids.size());
    Eigen::VectorXd probs = Eigen::VectorXd::Ones(t);
    if (t == 1) return probs;

    std::vector<double> bernoulli(tree_.nodes.size(), 0.5);
    for (std::size_t v = 0; v < tree_.nodes.size(); ++v) {
      if (tree_.nodes[v].is_leaf()) continue;
      double b = node_bernoulli(static_cast<int>(v), e);
      if (opts_.correction == CorrectionMode::node) {
        b = correct_node_bernoulli(b, node_states_[v].q_left,
                                   node_states_[v].p_left);
      }
      bernoulli[v] = b;
    }

    for (int c = 0; c < t; ++c) {
      double p = 1.0;
      int cur = 0;
      const int leaf = tree_.leaf_of_class.at(tree_.class_ids[c]);
      while (cur != leaf) {
        const TreeNode& node = tree_.nodes[cur];
        const bool go_left = std::binary_search(
            tree_.nodes[node.left].classes.begin(),
            tree_.nodes[node.left].classes.end(), tree_.class_ids[c]);
        p *= go_left ? bernoulli[cur] : 1.0 - bernoulli[cur];
        cur = go_left ? node.left : node.right;
      }
      probs[c] = p;
    }

    if (opts_.correction == CorrectionMode::leaf) {
      probs = correct_class_ratios(probs, {q_, p_});
    }
    return probs;
  }

  const Eigen::VectorXd& client_class_ratios() const { return q_; }
  const Eigen::VectorXd& conditioning_class_ratios() const { return p_; }

  /// Averaged left-branch probability of one internal node at a point;
  /// exposed so invariants over per-node decisions are testable.
  double node_bernoulli(int v, const Eigen::RowVectorXd& e) const {
    const NodeState& st = node_states_[v];
    if (st.degenerate) return st.left_prob;
    const double kss = gram_diag_value(kernel_);
    double acc = 0.0;
    long n = 0;
    if (!st.posteriors.empty()) {
      const Eigen::VectorXd kstar =
          gram(kernel_, st.cond_x, e).col(0);
      for (const auto& post : st.posteriors) {
        const auto p = post.predict(kstar, kss);
        acc += predictive_bernoulli(p.mu, p.var, gibbs_.gh_degree);
        ++n;
      }
    } else if (opts_.resample_test_omega) {
      // draw fresh omega chains for this prediction instead of reusing
      // the cached test-time sample
      const Eigen::VectorXd kstar = gram(kernel_, st.xbar, e).col(0);
      const auto samples = fitc_run_chains(
          st.fitc_Kmm, st.fitc_Knm, st.fitc_knn, st.fitc_labels,
          gibbs_.test_chains, gibbs_.burn_in, gibbs_.steps_between_samples, 1,
          resample_rng_);
      for (const auto& s : samples) {
        const FitcFactors factors(st.fitc_Kmm, st.fitc_Knm, st.fitc_knn,
                                  st.fitc_labels, s.omega);
        const auto p = factors.predict(kstar, kss);
        acc += predictive_bernoulli(p.mu, p.var, gibbs_.gh_degree);
        ++n;
      }
    } else {
      const Eigen::VectorXd kstar = gram(kernel_, st.xbar, e).col(0);
      for (const auto& cache : st.caches) {
        const auto p = cache.factors.predict(kstar, kss);
        acc += predictive_bernoulli(p.mu, p.var, gibbs_.gh_degree);
        ++n;
      }
    }
    return acc / static_cast<double>(n);
  }

 private:
  int class_index(int class_id) const {
    const int idx = maybe_class_index(class_id);
    if (idx < 0) throw std::invalid_argument("unknown class id");
    return idx;
  }
  int maybe_class_index(int class_id) const {
    const auto it = std::lower_bound(tree_.class_ids.begin(),
                                     tree_.class_ids.end(), class_id);
    if (it == tree_.class_ids.end() || *it != class_id) return -1;
    return static_cast<int>(it - tree_.class_ids.begin());
  }

  struct NodeState {
    bool degenerate = false;
    double left_prob = 0.5;
    double q_left = 0.5;
    double p_left = 0.5;
    Eigen::MatrixXd cond_x;
    std::vector<NodePosterior> posteriors;
    Eigen::MatrixXd xbar;
    std::vector<FITCCache> caches;
    Eigen::MatrixXd fitc_Kmm, fitc_Knm;
    Eigen::VectorXd fitc_knn;
    Eigen::VectorXi fitc_labels;
  };

  FeatureNetParams theta_;
  KernelConfig kernel_;
  TrainOptions opts_;
  GibbsConfig gibbs_;
  GPTreeModel tree_;
  Eigen::VectorXd q_, p_;
  std::vector<NodeState> node_states_;
  mutable Rng resample_rng_{0xfedc0de};
};

}  // namespace fedgp
