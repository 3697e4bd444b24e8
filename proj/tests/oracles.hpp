#pragma once

// Test-only oracles: brute-force enumerations and finite differences kept
// independent of the library implementations they check.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracles {

// Harrell's c-index by direct pair enumeration.
inline double cindex_bruteforce(const Eigen::VectorXd& risk, const Eigen::VectorXd& times,
                                const std::vector<int>& events) {
  double comparable = 0.0, score = 0.0;
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    for (Eigen::Index j = 0; j < times.size(); ++j) {
      if (events[static_cast<std::size_t>(i)] == 1 && times(i) < times(j)) {
        comparable += 1.0;
        if (risk(i) > risk(j))
          score += 1.0;
        else if (risk(i) == risk(j))
          score += 0.5;
      }
    }
  }
  return score / comparable;
}

// AUC as the Mann-Whitney pair statistic with half credit for ties.
inline double auc_mannwhitney(const Eigen::VectorXd& scores, const std::vector<int>& labels) {
  double pairs = 0.0, wins = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (labels[static_cast<std::size_t>(i)] != 1) continue;
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (labels[static_cast<std::size_t>(j)] != 0) continue;
      pairs += 1.0;
      if (scores(i) > scores(j))
        wins += 1.0;
      else if (scores(i) == scores(j))
        wins += 0.5;
    }
  }
  return wins / pairs;
}

inline double rank_sum_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (const double x : a)
    for (const double y : b) {
      if (x > y)
        u += 1.0;
      else if (x == y)
        u += 0.5;
    }
  return u;
}

// Exact two-sided rank-sum p-value by enumerating every assignment of the
// pooled values to the first sample.
inline double wilcoxon_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const int n = static_cast<int>(pooled.size());
  const int n1 = static_cast<int>(a.size());
  const double u_obs = rank_sum_u(a, b);

  long total = 0, le = 0, ge = 0;
  std::vector<int> pick(static_cast<std::size_t>(n1));
  const std::function<void(int, int)> recurse = [&](int start, int chosen) {
    if (chosen == n1) {
      std::vector<double> sa, sb;
      std::vector<bool> used(static_cast<std::size_t>(n), false);
      for (int k = 0; k < n1; ++k) used[static_cast<std::size_t>(pick[static_cast<std::size_t>(k)])] = true;
      for (int i = 0; i < n; ++i)
        (used[static_cast<std::size_t>(i)] ? sa : sb).push_back(pooled[static_cast<std::size_t>(i)]);
      const double u = rank_sum_u(sa, sb);
      ++total;
      if (u <= u_obs + 1e-12) ++le;
      if (u >= u_obs - 1e-12) ++ge;
      return;
    }
    for (int i = start; i <= n - (n1 - chosen); ++i) {
      pick[static_cast<std::size_t>(chosen)] = i;
      recurse(i + 1, chosen + 1);
    }
  };
  recurse(0, 0);
  const double p = 2.0 * std::min(static_cast<double>(le) / total, static_cast<double>(ge) / total);
  return std::min(1.0, p);
}

// Central finite differences of a scalar function of a vector.
inline Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                          const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double up = f(probe);
    probe(i) = x(i) - h;
    const double down = f(probe);
    probe(i) = x(i);
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

inline std::vector<double> mid_ranks(const Eigen::VectorXd& v) {
  const int n = static_cast<int>(v.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return v(a) < v(b); });
  std::vector<double> ranks(static_cast<std::size_t>(n));
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && v(order[static_cast<std::size_t>(j)]) == v(order[static_cast<std::size_t>(i)])) ++j;
    const double r = 0.5 * (i + 1 + j);
    for (int k = i; k < j; ++k) ranks[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = r;
    i = j;
  }
  return ranks;
}

inline double spearman(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const auto ra = mid_ranks(a);
  const auto rb = mid_ranks(b);
  const int n = static_cast<int>(a.size());
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) {
    ma += ra[static_cast<std::size_t>(i)];
    mb += rb[static_cast<std::size_t>(i)];
  }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (int i = 0; i < n; ++i) {
    const double xa = ra[static_cast<std::size_t>(i)] - ma;
    const double xb = rb[static_cast<std::size_t>(i)] - mb;
    num += xa * xb;
    da += xa * xa;
    db += xb * xb;
  }
  return num / std::sqrt(da * db);
}

inline double max_relative_error(const Eigen::VectorXd& got, const Eigen::VectorXd& expected) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < got.size(); ++i) {
    const double scale = std::max({1e-8, std::fabs(got(i)), std::fabs(expected(i))});
    worst = std::max(worst, std::fabs(got(i) - expected(i)) / scale);
  }
  return worst;
}

}  // namespace oracles
