#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/neural.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

// Risk-set convention: R(t) = { j : t_j >= t }, so subjects leaving exactly
// at t are still at risk. Tied event times share the same risk set
// (Breslow tie handling), both here and in the baseline hazard.

struct PartialLikelihood {
  double value = 0.0;
  Eigen::VectorXd gradient;  // w.r.t. the scores
};

inline PartialLikelihood neg_log_partial_likelihood(const Eigen::VectorXd& scores,
                                                    const Eigen::VectorXd& times,
                                                    const std::vector<int>& events) {
  const Eigen::Index n = times.size();
  if (scores.size() != n || static_cast<Eigen::Index>(events.size()) != n)
    throw ValidationError("partial likelihood inputs must be aligned");
  if (!scores.allFinite()) throw ValidationError("non-finite score");
  int n_events = 0;
  for (const int e : events) n_events += e;
  if (n_events == 0) throw ValidationError("partial likelihood needs at least one event");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return times(a) > times(b); });

  const double shift = scores.maxCoeff();  // log-sum-exp stabilization

  // Walk times in decreasing order, accumulating sum(exp(f - shift)) over the
  // risk set; D(t) is that sum once every subject with time == t is included.
  std::vector<double> risk_denom(static_cast<std::size_t>(n));  // per subject, shifted
  double cum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = times(order[i]);
    std::size_t j = i;
    while (j < order.size() && times(order[j]) == t) {
      cum += std::exp(scores(order[j]) - shift);
      ++j;
    }
    for (std::size_t k = i; k < j; ++k) risk_denom[static_cast<std::size_t>(order[k])] = cum;
    i = j;
  }

  PartialLikelihood out;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (events[static_cast<std::size_t>(k)] == 1)
      out.value += shift + std::log(risk_denom[static_cast<std::size_t>(k)]) - scores(k);
  }

  // gradient: g_k = exp(f_k - shift) * sum_{event i : t_i <= t_k} 1 / S_i - delta_k
  // accumulated over times in increasing order.
  out.gradient.resize(n);
  double cum_inv = 0.0;
  std::size_t r = order.size();
  while (r > 0) {
    std::size_t j = r;  // [j, r) is a tie group in increasing-time order
    const double t = times(order[r - 1]);
    while (j > 0 && times(order[j - 1]) == t) --j;
    int d = 0;
    for (std::size_t k = j; k < r; ++k) d += events[static_cast<std::size_t>(order[k])];
    if (d > 0) cum_inv += static_cast<double>(d) / risk_denom[static_cast<std::size_t>(order[j])];
    for (std::size_t k = j; k < r; ++k) {
      const int idx = order[k];
      out.gradient(idx) = std::exp(scores(idx) - shift) * cum_inv -
                          static_cast<double>(events[static_cast<std::size_t>(idx)]);
    }
    r = j;
  }
  return out;
}

struct CoxLinearModel {
  Eigen::VectorXd coefficients;
  double lambda = 0.0;
  double alpha = 0.0;
};

namespace detail {

inline double soft_threshold(double x, double width) {
  if (x > width) return x - width;
  if (x < -width) return x + width;
  return 0.0;
}

}  // namespace detail

// Elastic-net Cox regression by proximal gradient with a halving line
// search. Objective: npl(X theta) / n + lambda * (alpha |theta|_1 +
// (1 - alpha)/2 |theta|_2^2); the ridge part stays in the smooth term, the
// l1 part is handled by the soft-threshold prox.
inline CoxLinearModel fit_cox_en(const Eigen::MatrixXd& x, const Eigen::VectorXd& times,
                                 const std::vector<int>& events, double lambda, double alpha,
                                 double tol = 1e-7, int max_iter = 2000,
                                 std::vector<double>* objective_history = nullptr) {
  if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("alpha must be in [0, 1]");
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double ridge = lambda * (1.0 - alpha);
  const double l1 = lambda * alpha;

  const auto smooth = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    const PartialLikelihood pl = neg_log_partial_likelihood(x * theta, times, events);
    if (grad != nullptr) *grad = x.transpose() * pl.gradient * inv_n + ridge * theta;
    return pl.value * inv_n + 0.5 * ridge * theta.squaredNorm();
  };

  const auto objective = [&](const Eigen::VectorXd& theta, double smooth_value) {
    return smooth_value + l1 * theta.cwiseAbs().sum();
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd grad(p);
  double f = smooth(theta, &grad);
  double step = 1.0;
  if (objective_history != nullptr) objective_history->push_back(objective(theta, f));

  for (int iter = 0; iter < max_iter; ++iter) {
    if (!std::isfinite(f)) throw Error("Cox-EN diverged at iteration " + std::to_string(iter));
    Eigen::VectorXd candidate(p);
    double f_new = 0.0;
    for (int backtrack = 0;; ++backtrack) {
      for (Eigen::Index j = 0; j < p; ++j)
        candidate(j) = detail::soft_threshold(theta(j) - step * grad(j), step * l1);
      const Eigen::VectorXd diff = candidate - theta;
      f_new = smooth(candidate, nullptr);
      const double bound = f + grad.dot(diff) + diff.squaredNorm() / (2.0 * step);
      if (f_new <= bound + 1e-15) break;
      step *= 0.5;
      if (backtrack > 200) throw Error("Cox-EN line search failed at iteration " + std::to_string(iter));
    }
    const double max_change = (candidate - theta).cwiseAbs().maxCoeff();
    theta = candidate;
    f = smooth(theta, &grad);
    if (objective_history != nullptr) objective_history->push_back(objective(theta, f));
    if (max_change < tol) break;
    step = std::min(step * 2.0, 1e3);
  }
  return CoxLinearModel{std::move(theta), lambda, alpha};
}

struct CoxNeuralModel {
  MLPParams mlp;  // scalar linear output
  TrainConfig train_cfg;
};

// Cox loss neural model, trained full batch: the partial likelihood couples
// all samples through the risk sets, so every epoch sees the whole set.
inline CoxNeuralModel fit_cox_nn(const Eigen::MatrixXd& x, const Eigen::VectorXd& times,
                                 const std::vector<int>& events, const MLPArchitecture& arch,
                                 const TrainConfig& cfg, double validation_fraction = 0.2) {
  validate_architecture(arch);
  if (arch.layer_widths.back() != 1)
    throw ValidationError("Cox network must have a single output node");
  const int n = static_cast<int>(x.rows());

  Rng rng(cfg.seed ^ 0xa0761d6478bd642fULL);
  const std::vector<int> perm = rng.permutation(n);
  int n_val = static_cast<int>(std::floor(validation_fraction * n));
  n_val = std::clamp(n_val, 0, n - 2);
  std::vector<int> val(perm.begin(), perm.begin() + n_val);
  std::vector<int> train_idx(perm.begin() + n_val, perm.end());

  Eigen::VectorXd train_times(train_idx.size());
  std::vector<int> train_events(train_idx.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i) {
    train_times(static_cast<Eigen::Index>(i)) = times(train_idx[i]);
    train_events[i] = events[static_cast<std::size_t>(train_idx[i])];
  }

  const auto provider = [&](int) { return std::vector<std::vector<int>>{train_idx}; };
  const auto loss_fn = [&](const std::vector<int>&, const Eigen::MatrixXd& tapped) {
    const PartialLikelihood pl =
        neg_log_partial_likelihood(tapped.col(0), train_times, train_events);
    Eigen::MatrixXd grad(tapped.rows(), 1);
    grad.col(0) = pl.gradient;
    return std::make_pair(pl.value, std::move(grad));
  };

  ValidationFn validator;
  if (!val.empty()) {
    Eigen::MatrixXd xv(static_cast<Eigen::Index>(val.size()), x.cols());
    Eigen::VectorXd tv(val.size());
    std::vector<int> ev(val.size());
    int val_events = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      xv.row(static_cast<Eigen::Index>(i)) = x.row(val[i]);
      tv(static_cast<Eigen::Index>(i)) = times(val[i]);
      ev[i] = events[static_cast<std::size_t>(val[i])];
      val_events += ev[i];
    }
    if (val_events > 0) {
      validator = [xv = std::move(xv), tv = std::move(tv), ev = std::move(ev)](const MLPParams& p) {
        const auto acts = forward_batch(p, xv);
        return neg_log_partial_likelihood(acts.back().col(0), tv, ev).value /
               static_cast<double>(tv.size());
      };
    }
  }

  const MLPParams initial = init_params(arch, cfg.seed);
  CoxNeuralModel model;
  model.train_cfg = cfg;
  model.mlp = train(initial, x, initial.n_layers(), provider, loss_fn, cfg, validator).params;
  return model;
}

// Step estimate of the cumulative baseline hazard.
struct BaselineHazard {
  std::vector<double> times;   // distinct uncensored times, ascending
  std::vector<double> cumhaz;  // value from times[k] onward

  double at(double t) const {
    double h = 0.0;
    for (std::size_t k = 0; k < times.size() && times[k] <= t; ++k) h = cumhaz[k];
    return h;
  }
};

inline BaselineHazard breslow_baseline(const Eigen::VectorXd& scores, const Eigen::VectorXd& times,
                                       const std::vector<int>& events) {
  const Eigen::Index n = times.size();
  if (scores.size() != n || static_cast<Eigen::Index>(events.size()) != n)
    throw ValidationError("breslow_baseline inputs must be aligned");
  int n_events = 0;
  for (const int e : events) n_events += e;
  if (n_events == 0) throw ValidationError("breslow_baseline needs at least one event");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return times(a) > times(b); });

  const double shift = scores.maxCoeff();
  struct Step {
    double time;
    int d;
    double denom;  // shifted risk-set sum at this time
  };
  std::vector<Step> steps;
  double cum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = times(order[i]);
    std::size_t j = i;
    int d = 0;
    while (j < order.size() && times(order[j]) == t) {
      cum += std::exp(scores(order[j]) - shift);
      d += events[static_cast<std::size_t>(order[j])];
      ++j;
    }
    if (d > 0) steps.push_back({t, d, cum});
    i = j;
  }

  BaselineHazard h0;
  double h = 0.0;
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
    h += static_cast<double>(it->d) * std::exp(-shift) / it->denom;
    h0.times.push_back(it->time);
    h0.cumhaz.push_back(h);
  }
  return h0;
}

struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> survival;

  double at(double t) const {
    double s = 1.0;
    for (std::size_t k = 0; k < times.size() && times[k] <= t; ++k) s = survival[k];
    return s;
  }
};

// S(t) = exp(-H0(t) * exp(f)) evaluated at every baseline step time.
inline SurvivalCurve survival_function(const BaselineHazard& h0, double score) {
  SurvivalCurve curve;
  curve.times = h0.times;
  curve.survival.reserve(h0.cumhaz.size());
  const double hr = std::exp(score);
  for (const double h : h0.cumhaz) curve.survival.push_back(std::exp(-h * hr));
  return curve;
}

struct RiskOutput {
  Eigen::VectorXd log_hazard;
  Eigen::VectorXd hazard_ratio;
};

inline RiskOutput make_risk_output(Eigen::VectorXd f) {
  RiskOutput out;
  out.hazard_ratio = f.array().exp();
  out.log_hazard = std::move(f);
  return out;
}

inline Eigen::VectorXd predict_scores(const CoxLinearModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.coefficients.size())
    throw ValidationError("feature dimension does not match the linear Cox model");
  return x * model.coefficients;
}

inline Eigen::VectorXd predict_scores(const CoxNeuralModel& model, const Eigen::MatrixXd& x) {
  return forward_batch(model.mlp, x).back().col(0);
}

inline RiskOutput predict_risk(const CoxLinearModel& model, const Eigen::MatrixXd& x) {
  return make_risk_output(predict_scores(model, x));
}

inline RiskOutput predict_risk(const CoxNeuralModel& model, const Eigen::MatrixXd& x) {
  return make_risk_output(predict_scores(model, x));
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json baseline_to_json(const BaselineHazard& h0) {
  return nlohmann::json{{"times", h0.times}, {"cumhaz", h0.cumhaz}};
}

inline BaselineHazard baseline_from_json(const nlohmann::json& j) {
  BaselineHazard h0;
  h0.times = j.at("times").get<std::vector<double>>();
  h0.cumhaz = j.at("cumhaz").get<std::vector<double>>();
  if (h0.times.size() != h0.cumhaz.size())
    throw ValidationError("baseline hazard document is inconsistent");
  return h0;
}

inline nlohmann::json cox_linear_to_json(const CoxLinearModel& m) {
  return nlohmann::json{
      {"type", "linear"},
      {"coefficients", std::vector<double>(m.coefficients.data(),
                                           m.coefficients.data() + m.coefficients.size())},
      {"lambda", m.lambda},
      {"alpha", m.alpha}};
}

inline CoxLinearModel cox_linear_from_json(const nlohmann::json& j) {
  CoxLinearModel m;
  const auto coefs = j.at("coefficients").get<std::vector<double>>();
  m.coefficients = Eigen::Map<const Eigen::VectorXd>(coefs.data(),
                                                     static_cast<Eigen::Index>(coefs.size()));
  m.lambda = j.at("lambda").get<double>();
  m.alpha = j.at("alpha").get<double>();
  return m;
}

}  // namespace contrastsurv
