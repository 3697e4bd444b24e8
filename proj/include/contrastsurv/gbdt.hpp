#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/rng.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

struct GBTConfig {
  int max_depth = 3;
  int n_trees = 200;
  double learning_rate = 0.1;
  double l2 = 1.0;
  double subsample = 1.0;
  double min_child_weight = 0.0;
  std::uint64_t seed = 0;
};

inline void validate_gbt_config(const GBTConfig& cfg) {
  if (cfg.max_depth < 1) throw ValidationError("max_depth must be >= 1");
  if (cfg.n_trees < 0) throw ValidationError("n_trees must be >= 0");
  if (!(cfg.learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (cfg.l2 < 0.0) throw ValidationError("l2 must be >= 0");
  if (!(cfg.subsample > 0.0) || cfg.subsample > 1.0)
    throw ValidationError("subsample must be in (0, 1]");
  if (cfg.min_child_weight < 0.0) throw ValidationError("min_child_weight must be >= 0");
}

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double weight = 0.0;

  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    int idx = 0;
    while (!nodes[static_cast<std::size_t>(idx)].is_leaf()) {
      const TreeNode& node = nodes[static_cast<std::size_t>(idx)];
      idx = x(node.feature) < node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(idx)].weight;
  }
};

struct GBTEnsemble {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double base_score = 0.0;
  std::string objective;  // "logistic" or "cox"
};

struct GradHess {
  Eigen::VectorXd g;
  Eigen::VectorXd h;
};

inline GradHess grad_hess_logistic(const Eigen::VectorXd& scores, const std::vector<int>& labels) {
  const Eigen::Index n = scores.size();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw ValidationError("grad_hess_logistic inputs must be aligned");
  GradHess gh;
  gh.g.resize(n);
  gh.h.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = scores(i);
    const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    gh.g(i) = p - static_cast<double>(labels[static_cast<std::size_t>(i)]);
    gh.h(i) = p * (1.0 - p);
  }
  return gh;
}

// Gradient and exact Hessian diagonal of the negative log partial
// likelihood. Single ascending pass over tied time groups; risk sets follow
// R(t) = { j : t_j >= t } with Breslow tie handling.
inline GradHess grad_hess_cox(const Eigen::VectorXd& scores, const Eigen::VectorXd& times,
                              const std::vector<int>& events) {
  const Eigen::Index n = times.size();
  if (scores.size() != n || static_cast<Eigen::Index>(events.size()) != n)
    throw ValidationError("grad_hess_cox inputs must be aligned");
  int n_events = 0;
  for (const int e : events) n_events += e;
  if (n_events == 0) throw ValidationError("grad_hess_cox needs at least one event");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return times(a) < times(b); });

  const double shift = scores.maxCoeff();
  Eigen::VectorXd expf(n);
  for (Eigen::Index i = 0; i < n; ++i) expf(i) = std::exp(scores(i) - shift);

  // Suffix sums of exp(f) give the risk-set denominator at each tie group.
  std::vector<double> denom_at(static_cast<std::size_t>(n));
  {
    double cum = 0.0;
    std::size_t r = order.size();
    while (r > 0) {
      std::size_t j = r;
      const double t = times(order[r - 1]);
      while (j > 0 && times(order[j - 1]) == t) {
        cum += expf(order[j - 1]);
        --j;
      }
      for (std::size_t k = j; k < r; ++k) denom_at[static_cast<std::size_t>(order[k])] = cum;
      r = j;
    }
  }

  GradHess gh;
  gh.g.resize(n);
  gh.h.resize(n);
  double cum_inv = 0.0;
  double cum_inv_sq = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = times(order[i]);
    std::size_t j = i;
    int d = 0;
    while (j < order.size() && times(order[j]) == t) {
      d += events[static_cast<std::size_t>(order[j])];
      ++j;
    }
    if (d > 0) {
      const double denom = denom_at[static_cast<std::size_t>(order[i])];
      cum_inv += static_cast<double>(d) / denom;
      cum_inv_sq += static_cast<double>(d) / (denom * denom);
    }
    for (std::size_t k = i; k < j; ++k) {
      const int idx = order[k];
      const double e = expf(idx);
      gh.g(idx) = e * cum_inv - static_cast<double>(events[static_cast<std::size_t>(idx)]);
      // sum of pi * (1 - pi) over the event terms; clamp float cancellation
      gh.h(idx) = std::max(0.0, e * cum_inv - e * e * cum_inv_sq);
    }
    i = j;
  }
  return gh;
}

inline double split_gain(double g_left, double h_left, double g_right, double h_right,
                         double l2) {
  const double g = g_left + g_right;
  const double h = h_left + h_right;
  return 0.5 * (g_left * g_left / (h_left + l2) + g_right * g_right / (h_right + l2) -
                g * g / (h + l2));
}

inline double leaf_weight(double g, double h, double l2) {
  return h + l2 > 0.0 ? -g / (h + l2) : 0.0;
}

namespace detail {

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

// Exact greedy search: every feature, every midpoint between consecutive
// distinct values.
inline SplitChoice best_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                              const Eigen::VectorXd& h, const std::vector<int>& rows,
                              const GBTConfig& cfg) {
  SplitChoice best;
  double g_total = 0.0, h_total = 0.0;
  for (const int r : rows) {
    g_total += g(r);
    h_total += h(r);
  }
  std::vector<int> sorted_rows(rows);
  for (int feature = 0; feature < static_cast<int>(x.cols()); ++feature) {
    std::sort(sorted_rows.begin(), sorted_rows.end(),
              [&](int a, int b) { return x(a, feature) < x(b, feature); });
    double g_left = 0.0, h_left = 0.0;
    for (std::size_t k = 0; k + 1 < sorted_rows.size(); ++k) {
      g_left += g(sorted_rows[k]);
      h_left += h(sorted_rows[k]);
      const double v = x(sorted_rows[k], feature);
      const double v_next = x(sorted_rows[k + 1], feature);
      if (v == v_next) continue;
      const double h_right = h_total - h_left;
      if (h_left < cfg.min_child_weight || h_right < cfg.min_child_weight) continue;
      const double gain = split_gain(g_left, h_left, g_total - g_left, h_right, cfg.l2);
      if (gain > best.gain) {
        best.gain = gain;
        best.feature = feature;
        best.threshold = 0.5 * (v + v_next);
      }
    }
  }
  return best;
}

inline int grow_node(RegressionTree& tree, const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                     const Eigen::VectorXd& h, std::vector<int>& rows, int depth,
                     const GBTConfig& cfg) {
  double g_sum = 0.0, h_sum = 0.0;
  for (const int r : rows) {
    g_sum += g(r);
    h_sum += h(r);
  }
  const int idx = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();

  SplitChoice split;
  if (depth < cfg.max_depth && rows.size() >= 2) split = best_split(x, g, h, rows, cfg);
  if (split.feature < 0 || !(split.gain > 0.0)) {
    tree.nodes[static_cast<std::size_t>(idx)].weight = leaf_weight(g_sum, h_sum, cfg.l2);
    return idx;
  }

  std::vector<int> left_rows, right_rows;
  for (const int r : rows)
    (x(r, split.feature) < split.threshold ? left_rows : right_rows).push_back(r);
  rows.clear();
  rows.shrink_to_fit();

  const int left = grow_node(tree, x, g, h, left_rows, depth + 1, cfg);
  const int right = grow_node(tree, x, g, h, right_rows, depth + 1, cfg);
  TreeNode& node = tree.nodes[static_cast<std::size_t>(idx)];
  node.feature = split.feature;
  node.threshold = split.threshold;
  node.left = left;
  node.right = right;
  return idx;
}

}  // namespace detail

inline RegressionTree build_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                                 const Eigen::VectorXd& h, const GBTConfig& cfg,
                                 const std::vector<int>& rows) {
  validate_gbt_config(cfg);
  if (rows.empty()) throw ValidationError("build_tree needs at least one row");
  RegressionTree tree;
  std::vector<int> all_rows(rows);
  detail::grow_node(tree, x, g, h, all_rows, 0, cfg);
  return tree;
}

inline RegressionTree build_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                                 const Eigen::VectorXd& h, const GBTConfig& cfg) {
  std::vector<int> rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return build_tree(x, g, h, cfg, rows);
}

inline Eigen::VectorXd predict_gbt(const GBTEnsemble& ensemble, const Eigen::MatrixXd& x) {
  Eigen::VectorXd scores = Eigen::VectorXd::Constant(x.rows(), ensemble.base_score);
  for (const auto& tree : ensemble.trees)
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      scores(i) += ensemble.learning_rate * tree.predict(x.row(i));
  return scores;
}

namespace detail {

// Shared boosting loop. grad_hess(rows, scores) returns g/h for exactly the
// subsampled rows, aligned with that subset.
template <typename GradHessFn>
GBTEnsemble boost(const Eigen::MatrixXd& x, const GBTConfig& cfg, double base_score,
                  const std::string& objective, const GradHessFn& grad_hess) {
  validate_gbt_config(cfg);
  const int n = static_cast<int>(x.rows());
  GBTEnsemble ensemble;
  ensemble.learning_rate = cfg.learning_rate;
  ensemble.base_score = base_score;
  ensemble.objective = objective;

  Eigen::VectorXd scores = Eigen::VectorXd::Constant(n, base_score);
  Rng rng(cfg.seed);
  const int n_sub = std::max(1, static_cast<int>(std::lround(cfg.subsample * n)));

  for (int round = 0; round < cfg.n_trees; ++round) {
    std::vector<int> rows;
    if (n_sub >= n) {
      rows.resize(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), 0);
    } else {
      std::vector<int> perm = rng.permutation(n);
      rows.assign(perm.begin(), perm.begin() + n_sub);
      std::sort(rows.begin(), rows.end());
    }

    Eigen::VectorXd g_full = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd h_full = Eigen::VectorXd::Zero(n);
    const GradHess gh = grad_hess(rows, scores);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      g_full(rows[k]) = gh.g(static_cast<Eigen::Index>(k));
      h_full(rows[k]) = gh.h(static_cast<Eigen::Index>(k));
    }

    RegressionTree tree = build_tree(x, g_full, h_full, cfg, rows);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      scores(i) += cfg.learning_rate * tree.predict(x.row(i));
    ensemble.trees.push_back(std::move(tree));
  }
  return ensemble;
}

}  // namespace detail

inline GBTEnsemble fit_gbt_logistic(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                    const GBTConfig& cfg) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw ValidationError("labels must align with features");
  double mean = 0.0;
  for (const int y : labels) mean += y;
  mean /= static_cast<double>(labels.size());
  mean = std::clamp(mean, 1e-6, 1.0 - 1e-6);
  const double base = std::log(mean / (1.0 - mean));

  return detail::boost(x, cfg, base, "logistic",
                       [&](const std::vector<int>& rows, const Eigen::VectorXd& scores) {
                         Eigen::VectorXd s(rows.size());
                         std::vector<int> y(rows.size());
                         for (std::size_t k = 0; k < rows.size(); ++k) {
                           s(static_cast<Eigen::Index>(k)) = scores(rows[k]);
                           y[k] = labels[static_cast<std::size_t>(rows[k])];
                         }
                         return grad_hess_logistic(s, y);
                       });
}

inline GBTEnsemble fit_gbt_cox(const Eigen::MatrixXd& x, const Eigen::VectorXd& times,
                               const std::vector<int>& events, const GBTConfig& cfg) {
  if (times.size() != x.rows() || static_cast<Eigen::Index>(events.size()) != x.rows())
    throw ValidationError("survival data must align with features");
  std::vector<int> all_rows(static_cast<std::size_t>(x.rows()));
  std::iota(all_rows.begin(), all_rows.end(), 0);

  return detail::boost(x, cfg, 0.0, "cox",
                       [&](const std::vector<int>& rows, const Eigen::VectorXd& scores) {
                         // A subsample without any event carries no signal;
                         // fall back to the full set for that round.
                         const std::vector<int>* use = &rows;
                         int d = 0;
                         for (const int r : rows) d += events[static_cast<std::size_t>(r)];
                         if (d == 0) use = &all_rows;
                         Eigen::VectorXd s(use->size());
                         Eigen::VectorXd t(use->size());
                         std::vector<int> e(use->size());
                         for (std::size_t k = 0; k < use->size(); ++k) {
                           s(static_cast<Eigen::Index>(k)) = scores((*use)[k]);
                           t(static_cast<Eigen::Index>(k)) = times((*use)[k]);
                           e[k] = events[static_cast<std::size_t>((*use)[k])];
                         }
                         GradHess gh = grad_hess_cox(s, t, e);
                         if (use != &rows) {
                           // keep alignment with the requested subset
                           GradHess sub;
                           sub.g.resize(static_cast<Eigen::Index>(rows.size()));
                           sub.h.resize(static_cast<Eigen::Index>(rows.size()));
                           for (std::size_t k = 0; k < rows.size(); ++k) {
                             sub.g(static_cast<Eigen::Index>(k)) = gh.g(rows[k]);
                             sub.h(static_cast<Eigen::Index>(k)) = gh.h(rows[k]);
                           }
                           return sub;
                         }
                         return gh;
                       });
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json gbt_to_json(const GBTEnsemble& ensemble) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& tree : ensemble.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& node : tree.nodes) {
      nodes.push_back({{"f", node.feature},
                       {"t", node.threshold},
                       {"l", node.left},
                       {"r", node.right},
                       {"w", node.weight}});
    }
    trees.push_back(std::move(nodes));
  }
  return nlohmann::json{{"type", "boosted"},
                        {"objective", ensemble.objective},
                        {"learning_rate", ensemble.learning_rate},
                        {"base_score", ensemble.base_score},
                        {"trees", std::move(trees)}};
}

inline GBTEnsemble gbt_from_json(const nlohmann::json& j) {
  GBTEnsemble ensemble;
  ensemble.objective = j.at("objective").get<std::string>();
  ensemble.learning_rate = j.at("learning_rate").get<double>();
  ensemble.base_score = j.at("base_score").get<double>();
  for (const auto& tree_json : j.at("trees")) {
    RegressionTree tree;
    for (const auto& node_json : tree_json) {
      TreeNode node;
      node.feature = node_json.at("f").get<int>();
      node.threshold = node_json.at("t").get<double>();
      node.left = node_json.at("l").get<int>();
      node.right = node_json.at("r").get<int>();
      node.weight = node_json.at("w").get<double>();
      tree.nodes.push_back(node);
    }
    ensemble.trees.push_back(std::move(tree));
  }
  return ensemble;
}

}  // namespace contrastsurv
