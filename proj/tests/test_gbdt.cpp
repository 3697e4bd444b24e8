#include <catch2/catch_amalgamated.hpp>

#include "contrastsurv/cox.hpp"
#include "contrastsurv/gbdt.hpp"
#include "contrastsurv/rng.hpp"
#include "oracles.hpp"

namespace cs = contrastsurv;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (const double x : v) out(i++) = x;
  return out;
}

// Exhaustive root-split search over every feature and midpoint.
struct BruteSplit {
  double gain = 0.0;
  bool found = false;
};

BruteSplit brute_force_best_gain(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                                 const Eigen::VectorXd& h, double l2, double min_child_weight) {
  BruteSplit best;
  const int n = static_cast<int>(x.rows());
  for (int feature = 0; feature < static_cast<int>(x.cols()); ++feature) {
    std::vector<double> values;
    for (int i = 0; i < n; ++i) values.push_back(x(i, feature));
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (std::size_t k = 0; k + 1 < values.size(); ++k) {
      const double threshold = 0.5 * (values[k] + values[k + 1]);
      double gl = 0, hl = 0, gr = 0, hr = 0;
      for (int i = 0; i < n; ++i) {
        if (x(i, feature) < threshold) {
          gl += g(i);
          hl += h(i);
        } else {
          gr += g(i);
          hr += h(i);
        }
      }
      if (hl < min_child_weight || hr < min_child_weight) continue;
      const double gain = cs::split_gain(gl, hl, gr, hr, l2);
      if (gain > best.gain) {
        best.gain = gain;
        best.found = true;
      }
    }
  }
  return best;
}

double log_loss(const Eigen::VectorXd& scores, const std::vector<int>& y) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(cs::sigmoid(scores(i)), 1e-12, 1.0 - 1e-12);
    loss -= y[static_cast<std::size_t>(i)] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return loss / static_cast<double>(scores.size());
}

}  // namespace

TEST_CASE("logistic gradient and hessian") {
  SECTION("fixed points") {
    const auto gh = cs::grad_hess_logistic(vec({0.0, 50.0}), {1, 1});
    REQUIRE_THAT(gh.g(0), Catch::Matchers::WithinAbs(-0.5, 1e-12));
    REQUIRE_THAT(gh.h(0), Catch::Matchers::WithinAbs(0.25, 1e-12));
    REQUIRE_THAT(gh.g(1), Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(gh.h(1), Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
  SECTION("matches finite differences of the log-loss") {
    cs::Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 6;
      Eigen::VectorXd s(n);
      std::vector<int> y(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        s(i) = rng.uniform(-3.0, 3.0);
        y[static_cast<std::size_t>(i)] = rng.uniform01() < 0.5 ? 1 : 0;
      }
      const auto gh = cs::grad_hess_logistic(s, y);
      // total log-loss (sum), whose gradient is g
      const auto f = [&](const Eigen::VectorXd& scores) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
          const double p = cs::sigmoid(scores(i));
          total -= y[static_cast<std::size_t>(i)] == 1 ? std::log(p) : std::log(1.0 - p);
        }
        return total;
      };
      const Eigen::VectorXd numeric = oracles::central_difference(f, s);
      REQUIRE(oracles::max_relative_error(gh.g, numeric) <= 1e-5);
    }
  }
}

TEST_CASE("cox gradient and hessian for boosting") {
  SECTION("gradient agrees with the partial-likelihood module") {
    cs::Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 10;
      Eigen::VectorXd s(n), t(n);
      std::vector<int> e(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        s(i) = rng.uniform(-2.0, 2.0);
        t(i) = std::floor(rng.uniform(1.0, 6.0));
        e[static_cast<std::size_t>(i)] = rng.uniform01() < 0.7 ? 1 : 0;
      }
      e[0] = 1;
      const auto gh = cs::grad_hess_cox(s, t, e);
      const auto pl = cs::neg_log_partial_likelihood(s, t, e);
      REQUIRE(oracles::max_relative_error(gh.g, pl.gradient) <= 1e-12);
    }
  }
  SECTION("sole latest event has zero gradient") {
    const auto gh = cs::grad_hess_cox(vec({0.3, -0.2, 0.9}), vec({1, 2, 5}), {0, 0, 1});
    REQUIRE_THAT(gh.g(2), Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
  SECTION("hessian diagonal is non-negative") {
    cs::Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 12;
      Eigen::VectorXd s(n), t(n);
      std::vector<int> e(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        s(i) = rng.uniform(-3.0, 3.0);
        t(i) = rng.uniform(1.0, 50.0);
        e[static_cast<std::size_t>(i)] = rng.uniform01() < 0.6 ? 1 : 0;
      }
      e[0] = 1;
      const auto gh = cs::grad_hess_cox(s, t, e);
      for (Eigen::Index i = 0; i < n; ++i) REQUIRE(gh.h(i) >= 0.0);
    }
  }
}

TEST_CASE("tree building") {
  cs::GBTConfig cfg;
  cfg.max_depth = 2;
  cfg.l2 = 1.0;

  SECTION("constant gradient collapses to a single leaf") {
    Eigen::MatrixXd x(4, 2);
    x << 1, 2, 3, 4, 5, 6, 7, 8;
    const Eigen::VectorXd g = Eigen::VectorXd::Constant(4, 0.5);
    const Eigen::VectorXd h = Eigen::VectorXd::Constant(4, 1.0);
    const auto tree = cs::build_tree(x, g, h, cfg);
    REQUIRE(tree.nodes.size() == 1);
    REQUIRE(tree.nodes[0].is_leaf());
    REQUIRE_THAT(tree.nodes[0].weight, Catch::Matchers::WithinAbs(-2.0 / 5.0, 1e-12));
  }
  SECTION("perfect separator is found with the brute-force threshold") {
    Eigen::MatrixXd x(6, 1);
    x << 1, 2, 3, 10, 11, 12;
    Eigen::VectorXd g(6);
    g << -1, -1, -1, 1, 1, 1;
    const Eigen::VectorXd h = Eigen::VectorXd::Constant(6, 1.0);
    const auto tree = cs::build_tree(x, g, h, cfg);
    REQUIRE_FALSE(tree.nodes[0].is_leaf());
    REQUIRE(tree.nodes[0].feature == 0);
    REQUIRE_THAT(tree.nodes[0].threshold, Catch::Matchers::WithinAbs(6.5, 1e-12));
  }
  SECTION("root split gain matches exhaustive enumeration") {
    cs::Rng rng(11);
    for (int trial = 0; trial < 40; ++trial) {
      const int n = 4 + static_cast<int>(rng.below(17));  // n <= 20
      const int p = 1 + static_cast<int>(rng.below(3));   // p <= 3
      Eigen::MatrixXd x(n, p);
      Eigen::VectorXd g(n), h(n);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < p; ++j) x(i, j) = std::floor(rng.uniform(0.0, 6.0));
        g(i) = rng.uniform(-2.0, 2.0);
        h(i) = rng.uniform(0.05, 1.5);
      }
      cs::GBTConfig deep = cfg;
      deep.max_depth = 1;
      deep.min_child_weight = 0.1;
      const auto brute = brute_force_best_gain(x, g, h, deep.l2, deep.min_child_weight);
      const auto built = cs::build_tree(x, g, h, deep);
      if (!brute.found) {
        REQUIRE(built.nodes[0].is_leaf());
        continue;
      }
      REQUIRE_FALSE(built.nodes[0].is_leaf());
      // recompute the gain of the chosen split
      double gl = 0, hl = 0, gr = 0, hr = 0;
      for (int i = 0; i < n; ++i) {
        if (x(i, built.nodes[0].feature) < built.nodes[0].threshold) {
          gl += g(i);
          hl += h(i);
        } else {
          gr += g(i);
          hr += h(i);
        }
      }
      REQUIRE_THAT(cs::split_gain(gl, hl, gr, hr, deep.l2),
                   Catch::Matchers::WithinAbs(brute.gain, 1e-12));
    }
  }
  SECTION("shrinkage limit pushes leaf weights to zero") {
    Eigen::MatrixXd x(4, 1);
    x << 1, 2, 3, 4;
    Eigen::VectorXd g(4);
    g << -1, -1, 1, 1;
    const Eigen::VectorXd h = Eigen::VectorXd::Constant(4, 1.0);
    cs::GBTConfig strong = cfg;
    strong.l2 = 1e12;
    const auto tree = cs::build_tree(x, g, h, strong);
    for (const auto& node : tree.nodes)
      if (node.is_leaf()) REQUIRE(std::fabs(node.weight) < 1e-11);
  }
  SECTION("heavier l2 never grows a leaf weight") {
    cs::Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      const double g = rng.uniform(-3.0, 3.0);
      const double h = rng.uniform(0.0, 2.0);
      const double l2a = rng.uniform(0.0, 2.0);
      const double l2b = l2a + rng.uniform(0.0, 3.0);
      REQUIRE(std::fabs(cs::leaf_weight(g, h, l2b)) <=
              std::fabs(cs::leaf_weight(g, h, l2a)) + 1e-15);
    }
  }
}

TEST_CASE("boosting") {
  SECTION("zero trees predict the base score") {
    Eigen::MatrixXd x(5, 2);
    x.setRandom();
    const std::vector<int> y{1, 0, 1, 0, 1};
    cs::GBTConfig cfg;
    cfg.n_trees = 0;
    const auto ensemble = cs::fit_gbt_logistic(x, y, cfg);
    const double expected = std::log(0.6 / 0.4);
    const Eigen::VectorXd scores = cs::predict_gbt(ensemble, x);
    for (Eigen::Index i = 0; i < scores.size(); ++i)
      REQUIRE_THAT(scores(i), Catch::Matchers::WithinAbs(expected, 1e-12));
  }
  SECTION("single one-leaf tree adds eta times the weight") {
    cs::GBTEnsemble ensemble;
    ensemble.base_score = 0.2;
    ensemble.learning_rate = 0.1;
    cs::RegressionTree tree;
    cs::TreeNode leaf;
    leaf.weight = 0.7;
    tree.nodes.push_back(leaf);
    ensemble.trees.push_back(tree);
    const Eigen::VectorXd scores = cs::predict_gbt(ensemble, Eigen::MatrixXd::Zero(1, 3));
    REQUIRE_THAT(scores(0), Catch::Matchers::WithinAbs(0.2 + 0.1 * 0.7, 1e-12));
  }
  SECTION("training log-loss is non-increasing per round at full sample") {
    cs::Rng rng(17);
    const int n = 40, p = 3;
    Eigen::MatrixXd x(n, p);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) x(i, j) = rng.normal();
      y[static_cast<std::size_t>(i)] = x(i, 0) + 0.3 * rng.normal() > 0 ? 1 : 0;
    }
    cs::GBTConfig cfg;
    cfg.n_trees = 30;
    cfg.learning_rate = 0.3;
    cfg.max_depth = 2;
    const auto ensemble = cs::fit_gbt_logistic(x, y, cfg);

    cs::GBTEnsemble partial = ensemble;
    partial.trees.clear();
    double previous = log_loss(cs::predict_gbt(partial, x), y);
    for (const auto& tree : ensemble.trees) {
      partial.trees.push_back(tree);
      const double current = log_loss(cs::predict_gbt(partial, x), y);
      REQUIRE(current <= previous + 1e-12);
      previous = current;
    }
  }
  SECTION("xor pattern is learned exactly with depth 2") {
    Eigen::MatrixXd x(40, 2);
    std::vector<int> y(40);
    cs::Rng rng(21);
    for (int i = 0; i < 40; ++i) {
      const int a = i % 2, b = (i / 2) % 2;
      x(i, 0) = a + 0.05 * rng.uniform01();
      x(i, 1) = b + 0.05 * rng.uniform01();
      y[static_cast<std::size_t>(i)] = a ^ b;
    }
    cs::GBTConfig cfg;
    cfg.max_depth = 2;
    cfg.n_trees = 50;
    cfg.learning_rate = 0.3;
    cfg.l2 = 1.0;
    const auto ensemble = cs::fit_gbt_logistic(x, y, cfg);
    const Eigen::VectorXd scores = cs::predict_gbt(ensemble, x);
    int correct = 0;
    for (int i = 0; i < 40; ++i)
      if ((scores(i) > 0.0 ? 1 : 0) == y[static_cast<std::size_t>(i)]) ++correct;
    REQUIRE(correct == 40);
  }
  SECTION("unused features do not affect predictions") {
    cs::Rng rng(23);
    const int n = 30;
    Eigen::MatrixXd x(n, 3);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      x(i, 0) = rng.normal();
      x(i, 1) = 0.0;  // constant, can never split
      x(i, 2) = 0.0;
      y[static_cast<std::size_t>(i)] = x(i, 0) > 0 ? 1 : 0;
    }
    cs::GBTConfig cfg;
    cfg.n_trees = 20;
    const auto ensemble = cs::fit_gbt_logistic(x, y, cfg);
    for (const auto& tree : ensemble.trees)
      for (const auto& node : tree.nodes)
        if (!node.is_leaf()) REQUIRE(node.feature == 0);
    Eigen::MatrixXd altered = x;
    altered.col(1).setConstant(99.0);
    altered.col(2).setConstant(-99.0);
    REQUIRE(cs::predict_gbt(ensemble, altered) == cs::predict_gbt(ensemble, x));
  }
  SECTION("subsampled cox boosting is deterministic in the seed") {
    cs::Rng rng(29);
    const int n = 50;
    Eigen::MatrixXd x(n, 4);
    Eigen::VectorXd t(n);
    std::vector<int> e(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 4; ++j) x(i, j) = rng.normal();
      t(i) = rng.uniform(1.0, 100.0);
      e[static_cast<std::size_t>(i)] = rng.uniform01() < 0.7 ? 1 : 0;
    }
    e[0] = 1;
    cs::GBTConfig cfg;
    cfg.n_trees = 15;
    cfg.subsample = 0.6;
    cfg.seed = 77;
    const auto a = cs::fit_gbt_cox(x, t, e, cfg);
    const auto b = cs::fit_gbt_cox(x, t, e, cfg);
    REQUIRE(cs::predict_gbt(a, x) == cs::predict_gbt(b, x));
    cfg.seed = 78;
    const auto c = cs::fit_gbt_cox(x, t, e, cfg);
    REQUIRE(cs::predict_gbt(a, x) != cs::predict_gbt(c, x));
  }
}

TEST_CASE("gbt serialization preserves predictions bit-exactly") {
  cs::Rng rng(31);
  const int n = 25;
  Eigen::MatrixXd x(n, 3);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();
    y[static_cast<std::size_t>(i)] = rng.uniform01() < 0.5 ? 1 : 0;
  }
  cs::GBTConfig cfg;
  cfg.n_trees = 10;
  const auto ensemble = cs::fit_gbt_logistic(x, y, cfg);
  const auto back = cs::gbt_from_json(nlohmann::json::parse(cs::gbt_to_json(ensemble).dump()));
  REQUIRE(cs::predict_gbt(ensemble, x) == cs::predict_gbt(back, x));
}
