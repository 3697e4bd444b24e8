#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include <fstream>

#include "contrastsurv/error.hpp"
#include "contrastsurv/textio.hpp"

namespace contrastsurv {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Survival function of chi-square with 1 degree of freedom.
inline double chi2_sf_1df(double x) { return std::erfc(std::sqrt(std::max(x, 0.0) / 2.0)); }

// Product-limit survival curve. Steps only at times with at least one event.
struct KMCurve {
  std::vector<double> times;
  std::vector<double> survival;  // value from times[k] onward
  std::vector<int> at_risk;
  std::vector<int> events;

  // Right-continuous evaluation; 1 before the first event time.
  double at(double t) const {
    double s = 1.0;
    for (std::size_t k = 0; k < times.size() && times[k] <= t; ++k) s = survival[k];
    return s;
  }

  // Left limit: steps strictly before t.
  double at_left(double t) const {
    double s = 1.0;
    for (std::size_t k = 0; k < times.size() && times[k] < t; ++k) s = survival[k];
    return s;
  }
};

inline KMCurve km_estimator(const Eigen::VectorXd& times, const std::vector<int>& events) {
  const Eigen::Index n = times.size();
  if (n < 1) throw ValidationError("km_estimator needs at least one subject");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return times(a) < times(b); });

  KMCurve curve;
  double s = 1.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = times(order[i]);
    int d = 0;
    std::size_t j = i;
    while (j < order.size() && times(order[j]) == t) {
      d += events[static_cast<std::size_t>(order[j])];
      ++j;
    }
    if (d > 0) {
      const int n_at_risk = static_cast<int>(order.size() - i);
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(n_at_risk);
      curve.times.push_back(t);
      curve.survival.push_back(s);
      curve.at_risk.push_back(n_at_risk);
      curve.events.push_back(d);
    }
    i = j;
  }
  return curve;
}

// KM of the censoring distribution: censoring is the event.
struct CensoringKM {
  KMCurve curve;

  double at(double t) const { return curve.at(t); }
  double at_left(double t) const { return curve.at_left(t); }
};

inline CensoringKM censoring_km(const Eigen::VectorXd& times, const std::vector<int>& events) {
  std::vector<int> flipped(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) flipped[i] = 1 - events[i];
  return CensoringKM{km_estimator(times, flipped)};
}

// Harrell's c-index. A pair (i, j) is comparable when t_i < t_j and subject i
// had the event; it is concordant when risk_i > risk_j. Risk ties count 1/2.
inline double concordance_index(const Eigen::VectorXd& risk, const Eigen::VectorXd& times,
                                const std::vector<int>& events) {
  const Eigen::Index n = times.size();
  if (risk.size() != n || static_cast<Eigen::Index>(events.size()) != n)
    throw ValidationError("concordance_index inputs must be aligned");
  double comparable = 0.0;
  double score = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (events[static_cast<std::size_t>(i)] != 1) continue;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (times(i) >= times(j)) continue;
      comparable += 1.0;
      if (risk(i) > risk(j))
        score += 1.0;
      else if (risk(i) == risk(j))
        score += 0.5;
    }
  }
  if (comparable == 0.0) throw ValidationError("no comparable pairs for the c-index");
  return score / comparable;
}

// Inverse-probability-of-censoring weighted squared error of the predicted
// survival probabilities at time t. G is evaluated by its left limit at the
// subject's own event time and at t for still-at-risk subjects.
inline double brier_score(double t, const Eigen::VectorXd& survival_at_t,
                          const Eigen::VectorXd& times, const std::vector<int>& events,
                          const CensoringKM& g) {
  const Eigen::Index m = times.size();
  if (survival_at_t.size() != m || static_cast<Eigen::Index>(events.size()) != m)
    throw ValidationError("brier_score inputs must be aligned");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double s = survival_at_t(i);
    if (times(i) <= t && events[static_cast<std::size_t>(i)] == 1) {
      const double w = g.at_left(times(i));
      if (w <= 0.0)
        throw Error("censoring survival is zero at t=" + std::to_string(times(i)));
      sum += s * s / w;
    } else if (times(i) > t) {
      const double w = g.at(t);
      if (w <= 0.0) throw Error("censoring survival is zero at t=" + std::to_string(t));
      sum += (1.0 - s) * (1.0 - s) / w;
    }
  }
  return sum / static_cast<double>(m);
}

// Truncation horizon for the integrated Brier score: the latest uncensored
// training time whose risk set still holds at least min_risk_set subjects,
// capped by the latest test time.
inline double ibs_horizon(const Eigen::VectorXd& train_times, const std::vector<int>& train_events,
                          const Eigen::VectorXd& test_times, int min_risk_set = 20) {
  const Eigen::Index n = train_times.size();
  double t_max = -1.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (train_events[static_cast<std::size_t>(j)] != 1) continue;
    const int risk = static_cast<int>((train_times.array() >= train_times(j)).count());
    if (risk >= min_risk_set) t_max = std::max(t_max, train_times(j));
  }
  if (t_max <= 0.0)
    throw ValidationError("no uncensored training time has a risk set of size >= " +
                          std::to_string(min_risk_set));
  return std::min(t_max, test_times.maxCoeff());
}

// (1/T) * integral of BS(t) over [0, T], trapezoid rule on the grid of
// distinct uncensored event times (train and test) inside [0, T], plus the
// endpoints 0 and T.
inline double integrated_brier_score(
    const std::function<double(Eigen::Index subject, double t)>& survival_at,
    const Eigen::VectorXd& test_times, const std::vector<int>& test_events,
    const Eigen::VectorXd& train_times, const std::vector<int>& train_events,
    int min_risk_set = 20) {
  const double horizon = ibs_horizon(train_times, train_events, test_times, min_risk_set);
  std::set<double> grid;
  grid.insert(0.0);
  grid.insert(horizon);
  for (Eigen::Index i = 0; i < train_times.size(); ++i)
    if (train_events[static_cast<std::size_t>(i)] == 1 && train_times(i) > 0.0 &&
        train_times(i) < horizon)
      grid.insert(train_times(i));
  for (Eigen::Index i = 0; i < test_times.size(); ++i)
    if (test_events[static_cast<std::size_t>(i)] == 1 && test_times(i) > 0.0 &&
        test_times(i) < horizon)
      grid.insert(test_times(i));

  const CensoringKM g = censoring_km(test_times, test_events);
  const Eigen::Index m = test_times.size();
  std::vector<double> ts(grid.begin(), grid.end());
  std::vector<double> bs(ts.size());
  Eigen::VectorXd s_at(m);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    for (Eigen::Index i = 0; i < m; ++i) s_at(i) = survival_at(i, ts[k]);
    bs[k] = brier_score(ts[k], s_at, test_times, test_events, g);
  }
  double integral = 0.0;
  for (std::size_t k = 1; k < ts.size(); ++k)
    integral += 0.5 * (bs[k] + bs[k - 1]) * (ts[k] - ts[k - 1]);
  return integral / horizon;
}

struct ROCCurve {
  std::vector<double> fpr;
  std::vector<double> tpr;
  double auc = 0.0;
};

// Threshold sweep over distinct scores; ties are grouped so the trapezoid
// AUC equals the Mann-Whitney statistic with 1/2 credit for tied scores.
inline ROCCurve roc_auc(const Eigen::VectorXd& scores, const std::vector<int>& labels) {
  const Eigen::Index n = scores.size();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw ValidationError("roc_auc inputs must be aligned");
  double n_pos = 0.0, n_neg = 0.0;
  for (const int y : labels) (y == 1 ? n_pos : n_neg) += 1.0;
  if (n_pos == 0.0 || n_neg == 0.0)
    throw ValidationError("roc_auc needs both classes present");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });

  ROCCurve roc;
  roc.fpr.push_back(0.0);
  roc.tpr.push_back(0.0);
  double tp = 0.0, fp = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores(order[i]);
    std::size_t j = i;
    while (j < order.size() && scores(order[j]) == s) {
      if (labels[static_cast<std::size_t>(order[j])] == 1)
        tp += 1.0;
      else
        fp += 1.0;
      ++j;
    }
    roc.fpr.push_back(fp / n_neg);
    roc.tpr.push_back(tp / n_pos);
    i = j;
  }
  double auc = 0.0;
  for (std::size_t k = 1; k < roc.fpr.size(); ++k)
    auc += 0.5 * (roc.tpr[k] + roc.tpr[k - 1]) * (roc.fpr[k] - roc.fpr[k - 1]);
  roc.auc = auc;
  return roc;
}

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-group log-rank test with the hypergeometric variance at each distinct
// pooled event time.
inline LogRankResult log_rank_test(const Eigen::VectorXd& times_a, const std::vector<int>& events_a,
                                   const Eigen::VectorXd& times_b,
                                   const std::vector<int>& events_b) {
  if (times_a.size() == 0 || times_b.size() == 0)
    throw ValidationError("log_rank_test needs both groups non-empty");
  int total_events = 0;
  for (const int e : events_a) total_events += e;
  for (const int e : events_b) total_events += e;
  if (total_events == 0) throw ValidationError("log_rank_test needs at least one event");

  std::set<double> event_times;
  for (Eigen::Index i = 0; i < times_a.size(); ++i)
    if (events_a[static_cast<std::size_t>(i)] == 1) event_times.insert(times_a(i));
  for (Eigen::Index i = 0; i < times_b.size(); ++i)
    if (events_b[static_cast<std::size_t>(i)] == 1) event_times.insert(times_b(i));

  double observed_minus_expected = 0.0;
  double variance = 0.0;
  for (const double t : event_times) {
    double n_a = 0.0, n_b = 0.0, d_a = 0.0, d_b = 0.0;
    for (Eigen::Index i = 0; i < times_a.size(); ++i) {
      if (times_a(i) >= t) n_a += 1.0;
      if (times_a(i) == t && events_a[static_cast<std::size_t>(i)] == 1) d_a += 1.0;
    }
    for (Eigen::Index i = 0; i < times_b.size(); ++i) {
      if (times_b(i) >= t) n_b += 1.0;
      if (times_b(i) == t && events_b[static_cast<std::size_t>(i)] == 1) d_b += 1.0;
    }
    const double n = n_a + n_b;
    const double d = d_a + d_b;
    if (n <= 0.0) continue;
    observed_minus_expected += d_a - d * n_a / n;
    if (n > 1.0) variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
  }
  LogRankResult r;
  if (variance > 0.0) {
    r.statistic = observed_minus_expected * observed_minus_expected / variance;
    r.p_value = chi2_sf_1df(r.statistic);
  }
  return r;
}

struct WilcoxonResult {
  double u = 0.0;  // U statistic of the first sample
  double p_value = 1.0;
};

// Rank-sum test with mid-ranks for ties, tie-corrected variance, continuity
// correction, and a normal approximation for the two-sided p-value.
inline WilcoxonResult wilcoxon_rank_sum(const std::vector<double>& a,
                                        const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw ValidationError("wilcoxon_rank_sum needs non-empty samples");
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  const double n = n1 + n2;

  struct Item {
    double value;
    int group;
  };
  std::vector<Item> pooled;
  pooled.reserve(a.size() + b.size());
  for (const double v : a) pooled.push_back({v, 0});
  for (const double v : b) pooled.push_back({v, 1});
  std::sort(pooled.begin(), pooled.end(),
            [](const Item& x, const Item& y) { return x.value < y.value; });

  double rank_sum_a = 0.0;
  double tie_term = 0.0;
  std::size_t i = 0;
  while (i < pooled.size()) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].value == pooled[i].value) ++j;
    const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].group == 0) rank_sum_a += mid_rank;
    i = j;
  }

  WilcoxonResult r;
  r.u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
  const double mean = n1 * n2 / 2.0;
  double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) {
    r.p_value = 1.0;
    return r;
  }
  const double diff = r.u - mean;
  const double correction = diff > 0.0 ? -0.5 : (diff < 0.0 ? 0.5 : 0.0);
  const double z = (diff + correction) / std::sqrt(var);
  r.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::fabs(z))));
  return r;
}

inline void write_roc_csv(const ROCCurve& roc, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << "fpr,tpr\n";
  for (std::size_t k = 0; k < roc.fpr.size(); ++k)
    out << detail::format_double(roc.fpr[k]) << ',' << detail::format_double(roc.tpr[k]) << '\n';
}

inline void write_km_csv(const KMCurve& km, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << "time,survival,at_risk\n";
  for (std::size_t k = 0; k < km.times.size(); ++k)
    out << detail::format_double(km.times[k]) << ',' << detail::format_double(km.survival[k])
        << ',' << km.at_risk[k] << '\n';
}

}  // namespace contrastsurv
