#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "contrastsurv/contrastive.hpp"
#include "contrastsurv/rng.hpp"
#include "oracles.hpp"

namespace cs = contrastsurv;

namespace {

// Direct scalar enumeration of the contrastive objective on (optionally
// pre-normalized) embeddings.
double supcon_by_enumeration(const Eigen::MatrixXd& z, const std::vector<int>& labels,
                             double tau, bool normalize) {
  Eigen::MatrixXd zz = z;
  if (normalize) {
    for (Eigen::Index i = 0; i < zz.rows(); ++i) {
      const double n = zz.row(i).norm();
      if (n > 1e-12) zz.row(i) /= n;
    }
  }
  double total = 0.0;
  const Eigen::Index nb = zz.rows();
  for (Eigen::Index i = 0; i < nb; ++i) {
    std::vector<Eigen::Index> pos;
    for (Eigen::Index p = 0; p < nb; ++p)
      if (p != i && labels[static_cast<std::size_t>(p)] == labels[static_cast<std::size_t>(i)])
        pos.push_back(p);
    if (pos.empty()) continue;
    double denom = 0.0;
    for (Eigen::Index a = 0; a < nb; ++a)
      if (a != i) denom += std::exp(zz.row(i).dot(zz.row(a)) / tau);
    for (const Eigen::Index p : pos)
      total += -std::log(std::exp(zz.row(i).dot(zz.row(p)) / tau) / denom) /
               static_cast<double>(pos.size());
  }
  return total;
}

Eigen::MatrixXd random_embeddings(cs::Rng& rng, int n, int d) {
  Eigen::MatrixXd z(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) z(i, j) = rng.uniform(-1.5, 1.5);
  // keep rows away from the normalization floor
  for (int i = 0; i < n; ++i)
    if (z.row(i).norm() < 0.3) z(i, 0) += 1.0;
  return z;
}

}  // namespace

TEST_CASE("pfi group assignment") {
  cs::Rng rng(5);
  SECTION("exact division") {
    Eigen::VectorXd t(45);
    for (int i = 0; i < 45; ++i) t(i) = rng.uniform(0.0, 100.0);
    const auto g = cs::assign_pfi_groups(t, 15);
    REQUIRE(g.m == 3);
    REQUIRE(g.group_sizes == std::vector<int>{15, 15, 15});
  }
  SECTION("remainder goes to the earliest groups") {
    Eigen::VectorXd t(47);
    for (int i = 0; i < 47; ++i) t(i) = rng.uniform(0.0, 100.0);
    const auto g = cs::assign_pfi_groups(t, 15);
    REQUIRE(g.m == 3);
    REQUIRE(g.group_sizes == std::vector<int>{16, 16, 15});
  }
  SECTION("labels are non-decreasing along sorted times") {
    Eigen::VectorXd t(31);
    for (int i = 0; i < 31; ++i) t(i) = std::floor(rng.uniform(0.0, 10.0));
    const auto g = cs::assign_pfi_groups(t, 10);
    std::vector<int> order(31);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return t(a) < t(b); });
    for (std::size_t k = 1; k < order.size(); ++k)
      REQUIRE(g.labels[static_cast<std::size_t>(order[k])] >=
              g.labels[static_cast<std::size_t>(order[k - 1])]);
    int total = 0;
    for (const int s : g.group_sizes) total += s;
    REQUIRE(total == 31);
    const auto [lo, hi] = std::minmax_element(g.group_sizes.begin(), g.group_sizes.end());
    REQUIRE(*hi - *lo <= 1);
  }
  SECTION("stable sort keeps tied samples in input order") {
    Eigen::VectorXd t(4);
    t << 5, 5, 5, 5;
    const auto g = cs::assign_pfi_groups(t, 2);
    // two groups of two; earlier indices land in the earlier group
    REQUIRE(g.labels == std::vector<int>{0, 0, 1, 1});
  }
  SECTION("too few samples") {
    Eigen::VectorXd t(1);
    t << 1.0;
    REQUIRE_THROWS_AS(cs::assign_pfi_groups(t, 15), cs::ValidationError);
  }
}

TEST_CASE("supcon loss values") {
  cs::SupConConfig cfg;
  cfg.temperature = 1.0;
  cfg.normalize_embeddings = false;

  SECTION("batch of two with equal labels is exactly zero") {
    Eigen::MatrixXd z(2, 3);
    z << 0.3, -1.0, 2.0, 0.5, 0.5, -0.25;
    const auto r = cs::supcon_loss(z, {4, 4}, cfg);
    REQUIRE(r.loss == 0.0);
    REQUIRE(r.active_anchors == 2);
  }
  SECTION("anchor without positives contributes nothing") {
    Eigen::MatrixXd z(3, 2);
    z << 1.0, 0.0, 0.0, 1.0, -1.0, 0.5;
    const auto with_b = cs::supcon_loss(z, {0, 0, 1}, cfg);
    REQUIRE(with_b.active_anchors == 2);
    // anchor 2's rows still receive gradient as a negative of the others
    REQUIRE_THAT(with_b.loss,
                 Catch::Matchers::WithinAbs(supcon_by_enumeration(z, {0, 0, 1}, 1.0, false),
                                            1e-12));
  }
  SECTION("three-point batch matches direct enumeration") {
    Eigen::MatrixXd z(3, 3);
    z << 1, 0, 0, 0.6, 0.8, 0, 0, 0.6, 0.8;
    const auto r = cs::supcon_loss(z, {0, 0, 1}, cfg);
    REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(
                             supcon_by_enumeration(z, {0, 0, 1}, 1.0, false), 1e-12));
  }
  SECTION("degenerate batch errors") {
    Eigen::MatrixXd z(3, 2);
    z << 1, 0, 0, 1, 1, 1;
    REQUIRE_THROWS_WITH(cs::supcon_loss(z, {0, 1, 2}, cfg),
                        Catch::Matchers::ContainsSubstring("degenerate"));
  }
  SECTION("non-finite embedding errors") {
    Eigen::MatrixXd z(2, 2);
    z << 1, 0, std::numeric_limits<double>::quiet_NaN(), 1;
    REQUIRE_THROWS_AS(cs::supcon_loss(z, {0, 0}, cfg), cs::ValidationError);
  }
}

TEST_CASE("supcon loss properties") {
  cs::Rng rng(31);
  cs::SupConConfig cfg;
  cfg.temperature = 0.5;

  SECTION("non-negative everywhere; positive when a negative sample is present") {
    for (int trial = 0; trial < 25; ++trial) {
      const int n = 3 + static_cast<int>(rng.below(5));
      Eigen::MatrixXd z = random_embeddings(rng, n, 4);
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));
      labels[0] = labels[1] = 0;  // ensure at least one positive pair
      const auto r = cs::supcon_loss(z, labels, cfg);
      REQUIRE(r.loss >= 0.0);
      if (std::count(labels.begin(), labels.end(), 0) < n) REQUIRE(r.loss > 0.0);
    }
  }
  SECTION("invariant under positive rescaling when normalizing") {
    cfg.normalize_embeddings = true;
    const Eigen::MatrixXd z = random_embeddings(rng, 5, 3);
    const std::vector<int> labels{0, 0, 1, 1, 0};
    const auto a = cs::supcon_loss(z, labels, cfg);
    const auto b = cs::supcon_loss((3.0 * z).eval(), labels, cfg);
    REQUIRE_THAT(a.loss, Catch::Matchers::WithinAbs(b.loss, 1e-9));
  }
  SECTION("permutation leaves the total loss unchanged") {
    const Eigen::MatrixXd z = random_embeddings(rng, 6, 3);
    const std::vector<int> labels{0, 1, 0, 1, 2, 0};
    const auto base = cs::supcon_loss(z, labels, cfg);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Eigen::MatrixXd zp(6, 3);
    std::vector<int> lp(6);
    for (int i = 0; i < 6; ++i) {
      zp.row(i) = z.row(perm[static_cast<std::size_t>(i)]);
      lp[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    const auto permuted = cs::supcon_loss(zp, lp, cfg);
    REQUIRE_THAT(base.loss, Catch::Matchers::WithinAbs(permuted.loss, 1e-12));
  }
  SECTION("value matches enumeration with normalization on") {
    cfg.normalize_embeddings = true;
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 4 + static_cast<int>(rng.below(3));
      const Eigen::MatrixXd z = random_embeddings(rng, n, 3);
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));
      labels[0] = labels[1] = 0;
      const auto r = cs::supcon_loss(z, labels, cfg);
      REQUIRE_THAT(r.loss,
                   Catch::Matchers::WithinAbs(
                       supcon_by_enumeration(z, labels, cfg.temperature, true), 1e-12));
    }
  }
}

TEST_CASE("supcon gradient matches finite differences") {
  cs::Rng rng(37);
  for (const bool normalize : {false, true}) {
    cs::SupConConfig cfg;
    cfg.temperature = 0.7;
    cfg.normalize_embeddings = normalize;
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 3 + static_cast<int>(rng.below(4));
      const int d = 3;
      const Eigen::MatrixXd z = random_embeddings(rng, n, d);
      std::vector<int> labels;
      for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));
      labels[0] = labels[1] = 0;

      const auto r = cs::supcon_loss(z, labels, cfg);
      const auto loss_of = [&](const Eigen::VectorXd& flat) {
        Eigen::MatrixXd m(n, d);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) m(i, j) = flat(i * d + j);
        return supcon_by_enumeration(m, labels, cfg.temperature, normalize);
      };
      Eigen::VectorXd flat(n * d);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) flat(i * d + j) = z(i, j);
      const Eigen::VectorXd numeric = oracles::central_difference(loss_of, flat);
      Eigen::VectorXd analytic(n * d);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) analytic(i * d + j) = r.grad(i, j);
      INFO("normalize " << normalize << " trial " << trial);
      REQUIRE(oracles::max_relative_error(analytic, numeric) <= 1e-4);
    }
  }
}

TEST_CASE("make_batches") {
  cs::GroupLabeling labeling;
  SECTION("single batch when batch_size covers everything") {
    labeling.labels = {0, 0, 1, 1, 1};
    labeling.m = 2;
    const auto plan = cs::make_batches(labeling, 5, 9);
    REQUIRE(plan.batches.size() == 1);
    REQUIRE(plan.batches[0].size() == 5);
    REQUIRE(plan.dropped == 0);
  }
  SECTION("same seed gives the same plan") {
    labeling.labels.assign(30, 0);
    for (int i = 15; i < 30; ++i) labeling.labels[static_cast<std::size_t>(i)] = 1;
    labeling.m = 2;
    const auto a = cs::make_batches(labeling, 7, 123);
    const auto b = cs::make_batches(labeling, 7, 123);
    REQUIRE(a.batches == b.batches);
    const auto c = cs::make_batches(labeling, 7, 124);
    REQUIRE(a.batches != c.batches);
  }
  SECTION("every emitted batch has a usable anchor") {
    labeling.labels.clear();
    for (int i = 0; i < 30; ++i) labeling.labels.push_back(i < 15 ? 0 : 1);
    labeling.m = 2;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto plan = cs::make_batches(labeling, 10, seed);
      for (const auto& batch : plan.batches) {
        bool has_pair = false;
        for (std::size_t i = 0; i < batch.size() && !has_pair; ++i)
          for (std::size_t j = i + 1; j < batch.size(); ++j)
            if (labeling.labels[static_cast<std::size_t>(batch[i])] ==
                labeling.labels[static_cast<std::size_t>(batch[j])]) {
              has_pair = true;
              break;
            }
        REQUIRE(has_pair);
      }
      // batches partition a subset of the input
      std::set<int> seen;
      for (const auto& batch : plan.batches)
        for (const int idx : batch) REQUIRE(seen.insert(idx).second);
    }
  }
  SECTION("hopeless batches are dropped and counted") {
    labeling.labels = {0, 1, 2, 3, 4, 5};
    labeling.m = 6;
    const auto plan = cs::make_batches(labeling, 3, 1);
    REQUIRE(plan.batches.empty());
    REQUIRE(plan.dropped == 2);
  }
}

TEST_CASE("extract_features") {
  cs::MLPParams zero;
  zero.weights = {Eigen::MatrixXd::Zero(4, 3), Eigen::MatrixXd::Zero(2, 4)};
  zero.biases = {Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(2)};
  Eigen::MatrixXd x(5, 3);
  cs::Rng rng(41);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = rng.uniform(-1.0, 1.0);

  SECTION("final tap of the zero network is all zeros") {
    const auto f = cs::extract_features(zero, cs::EmbeddingTap{2}, x);
    REQUIRE(f.isZero(0.0));
  }
  SECTION("hidden tap of the zero network is all one-half") {
    const auto f = cs::extract_features(zero, cs::EmbeddingTap{1}, x);
    REQUIRE(f.isConstant(0.5));
  }
  SECTION("rows agree with forward for random samples") {
    const auto p = cs::init_params(cs::MLPArchitecture{{3, 4, 2}}, 17);
    const auto f = cs::extract_features(p, cs::EmbeddingTap{1}, x);
    for (int i = 0; i < 5; ++i) {
      const auto acts = cs::forward(p, x.row(i).transpose());
      REQUIRE(f.row(i).transpose() == acts[1]);
    }
  }
  SECTION("invalid tap errors") {
    REQUIRE_THROWS_AS(cs::extract_features(zero, cs::EmbeddingTap{3}, x), cs::ValidationError);
    REQUIRE_THROWS_AS(cs::extract_features(zero, cs::EmbeddingTap{0}, x), cs::ValidationError);
  }
}

TEST_CASE("train_cl learns group structure on a separable cohort") {
  // two latent prognosis groups with distinct expression signatures
  cs::Rng rng(55);
  const int n = 60, p = 12;
  Eigen::MatrixXd x(n, p);
  Eigen::VectorXd times(n);
  for (int i = 0; i < n; ++i) {
    const bool late = i % 2 == 0;
    times(i) = late ? rng.uniform(800.0, 1000.0) : rng.uniform(10.0, 200.0);
    for (int j = 0; j < p; ++j) {
      const double mean = (late == (j < p / 2)) ? 2.0 : -2.0;
      x(i, j) = mean + 0.3 * rng.normal();
    }
  }
  cs::MLPArchitecture arch{{p, 8, 4}};
  cs::TrainConfig tcfg;
  tcfg.learning_rate = 0.1;
  tcfg.max_epochs = 60;
  tcfg.patience = 60;
  tcfg.seed = 3;
  cs::SupConConfig sccfg;
  sccfg.batch_size = 20;
  sccfg.target_group_size = 30;  // two groups

  const auto params = cs::train_cl(x, times, arch, tcfg, sccfg);
  const auto z = cs::extract_features(params, cs::EmbeddingTap{2}, x);

  double within = 0.0, between = 0.0;
  int n_within = 0, n_between = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double cosine = z.row(i).dot(z.row(j)) /
                            std::max(1e-12, z.row(i).norm() * z.row(j).norm());
      if ((i % 2) == (j % 2)) {
        within += cosine;
        ++n_within;
      } else {
        between += cosine;
        ++n_between;
      }
    }
  }
  REQUIRE(within / n_within > between / n_between);

  SECTION("zero epochs return the initial parameters") {
    cs::TrainConfig none = tcfg;
    none.max_epochs = 0;
    const auto untouched = cs::train_cl(x, times, arch, none, sccfg);
    const auto initial = cs::init_params(arch, none.seed);
    REQUIRE(untouched.weights[0] == initial.weights[0]);
    REQUIRE(untouched.weights[1] == initial.weights[1]);
  }
  SECTION("same seed reproduces the parameters bit for bit") {
    const auto again = cs::train_cl(x, times, arch, tcfg, sccfg);
    REQUIRE(params.weights[0] == again.weights[0]);
    REQUIRE(params.weights[1] == again.weights[1]);
    REQUIRE(params.biases[0] == again.biases[0]);
  }
}
