#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "contrastsurv/contrastive.hpp"
#include "contrastsurv/cox.hpp"
#include "contrastsurv/data_model.hpp"
#include "contrastsurv/error.hpp"
#include "contrastsurv/executor.hpp"
#include "contrastsurv/gbdt.hpp"
#include "contrastsurv/metrics.hpp"
#include "contrastsurv/neural.hpp"
#include "contrastsurv/rng.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

// --- splits and provenance --------------------------------------------------

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct IndexSplit {
  std::vector<int> train;
  std::vector<int> test;
};

inline IndexSplit split_indices(int n, const SplitSpec& spec) {
  if (n < 5) throw ValidationError("train_test_split needs at least 5 samples");
  if (!(spec.train_fraction > 0.0) || !(spec.train_fraction < 1.0))
    throw ValidationError("train_fraction must be in (0, 1)");
  Rng rng(spec.seed);
  const std::vector<int> perm = rng.permutation(n);
  const int n_train =
      static_cast<int>(std::ceil(spec.train_fraction * static_cast<double>(n)));
  IndexSplit split;
  split.train.assign(perm.begin(), perm.begin() + n_train);
  split.test.assign(perm.begin() + n_train, perm.end());
  return split;
}

inline CohortDataset subset_cohort(const CohortDataset& ds, const std::vector<int>& rows) {
  CohortDataset out;
  out.cancer_type = ds.cancer_type;
  out.expression.gene_ids = ds.expression.gene_ids;
  out.expression.scale = ds.expression.scale;
  out.expression.values.resize(static_cast<Eigen::Index>(rows.size()), ds.expression.n_genes());
  out.clinical.time.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.expression.sample_ids.push_back(ds.expression.sample_ids[static_cast<std::size_t>(rows[i])]);
    out.expression.values.row(static_cast<Eigen::Index>(i)) = ds.expression.values.row(rows[i]);
    out.clinical.sample_ids.push_back(ds.clinical.sample_ids[static_cast<std::size_t>(rows[i])]);
    out.clinical.time(static_cast<Eigen::Index>(i)) = ds.clinical.time(rows[i]);
    out.clinical.event.push_back(ds.clinical.event[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

inline std::pair<CohortDataset, CohortDataset> train_test_split(const CohortDataset& ds,
                                                                const SplitSpec& spec) {
  const IndexSplit split = split_indices(static_cast<int>(ds.expression.n_samples()), spec);
  return {subset_cohort(ds, split.train), subset_cohort(ds, split.test)};
}

// Split tags for the leakage audit. Every fit inside cross-validation and
// pooled training must pass its consumed row set through require_train.
struct SplitProvenance {
  std::vector<std::uint8_t> is_train;
  mutable std::atomic<long> checks{0};

  SplitProvenance() = default;
  SplitProvenance(int n, const std::vector<int>& train_rows)
      : is_train(static_cast<std::size_t>(n), 0) {
    for (const int r : train_rows) is_train[static_cast<std::size_t>(r)] = 1;
  }
  SplitProvenance(const SplitProvenance& other)
      : is_train(other.is_train), checks(other.checks.load()) {}

  void require_train(const std::vector<int>& rows) const {
    for (const int r : rows) {
      if (r < 0 || static_cast<std::size_t>(r) >= is_train.size() ||
          is_train[static_cast<std::size_t>(r)] == 0)
        throw Error("leakage: fitting consumed a non-training sample (row " +
                    std::to_string(r) + ")");
    }
    checks.fetch_add(1);
  }
};

// --- labeling and stratification ---------------------------------------------

struct ClassifierLabels {
  std::vector<int> labels;   // aligned with kept: 1 = high risk, 0 = low risk
  std::vector<int> kept;     // indices into the input table
  std::vector<int> dropped;  // censored before the horizon: unlabelable
};

inline ClassifierLabels classifier_labeling(const ClinicalTable& clinical,
                                            int horizon_days = 1095) {
  ClassifierLabels out;
  for (Eigen::Index i = 0; i < clinical.size(); ++i) {
    const double t = clinical.time(i);
    const int event = clinical.event[static_cast<std::size_t>(i)];
    if (t >= static_cast<double>(horizon_days)) {
      out.kept.push_back(static_cast<int>(i));
      out.labels.push_back(0);
    } else if (event == 1) {
      out.kept.push_back(static_cast<int>(i));
      out.labels.push_back(1);
    } else {
      out.dropped.push_back(static_cast<int>(i));
    }
  }
  if (out.kept.empty()) throw ValidationError("no sample can be labeled at this horizon");
  return out;
}

// Empirical percentile with linear interpolation between order statistics.
inline double percentile_linear(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  const double h = p * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

// High/low split at the training-set median hazard ratio; ties go low.
inline std::vector<int> stratify_by_median_hr(const std::vector<double>& train_hr,
                                              const std::vector<double>& test_hr) {
  const double cutoff = percentile_linear(train_hr, 0.5);
  std::vector<int> groups;
  groups.reserve(test_hr.size());
  for (const double hr : test_hr) groups.push_back(hr > cutoff ? 1 : 0);
  return groups;
}

// Three-way split at the training-set percentiles: 2 = high, 1 = medium,
// 0 = low. HR >= c_high wins first, so degenerate cutoffs route to high.
inline std::vector<int> stratify_by_percentiles(const std::vector<double>& train_hr,
                                                const std::vector<double>& test_hr,
                                                double p_high = 0.73, double p_low = 0.51) {
  if (!(p_low < p_high)) throw ValidationError("p_low must be below p_high");
  const double c_high = percentile_linear(train_hr, p_high);
  const double c_low = percentile_linear(train_hr, p_low);
  std::vector<int> groups;
  groups.reserve(test_hr.size());
  for (const double hr : test_hr) {
    if (hr >= c_high)
      groups.push_back(2);
    else if (hr >= c_low)
      groups.push_back(1);
    else
      groups.push_back(0);
  }
  return groups;
}

// --- synthetic cohorts --------------------------------------------------------

struct SyntheticCohort {
  CohortDataset dataset;
  Eigen::VectorXd true_log_hazard;
  Eigen::MatrixXd latent;
  double realized_censor_rate = 0.0;
};

// Latent low-rank expression with exponential event times. Expression is
// softplus(A z + noise) and the hazard rate is proportional to
// exp(beta' z) with |beta| = signal_strength. Censoring times are uniform
// on [0, horizon] with the horizon tuned to hit censor_rate within 0.1.
inline constexpr double kExpressionNoise = 1.0;  // per-gene noise inside softplus

inline SyntheticCohort synthetic_cohort(int n_samples, int n_genes, int latent_dim,
                                        double signal_strength, double censor_rate,
                                        std::uint64_t seed) {
  if (latent_dim > n_genes) throw ValidationError("latent_dim must not exceed n_genes");
  if (n_samples < 2 || latent_dim < 1) throw ValidationError("cohort too small");
  if (censor_rate < 0.0 || censor_rate >= 1.0)
    throw ValidationError("censor_rate must be in [0, 1)");
  Rng rng(seed);

  Eigen::MatrixXd mixing(n_genes, latent_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(latent_dim));
  for (int g = 0; g < n_genes; ++g)
    for (int k = 0; k < latent_dim; ++k) mixing(g, k) = rng.normal() * scale;

  Eigen::VectorXd beta(latent_dim);
  for (int k = 0; k < latent_dim; ++k) beta(k) = rng.normal();
  const double beta_norm = beta.norm();
  beta = (signal_strength > 0.0 && beta_norm > 0.0) ? (beta * (signal_strength / beta_norm)).eval()
                                                    : Eigen::VectorXd::Zero(latent_dim).eval();

  Eigen::MatrixXd latent(n_samples, latent_dim);
  for (int i = 0; i < n_samples; ++i)
    for (int k = 0; k < latent_dim; ++k) latent(i, k) = rng.normal();

  Eigen::MatrixXd expression(n_samples, n_genes);
  for (int i = 0; i < n_samples; ++i) {
    const Eigen::VectorXd mean = mixing * latent.row(i).transpose();
    for (int g = 0; g < n_genes; ++g) {
      const double z = mean(g) + kExpressionNoise * rng.normal();
      expression(i, g) = z > 30.0 ? z : std::log1p(std::exp(z));  // softplus
    }
  }

  const Eigen::VectorXd log_hazard = latent * beta;
  const double base_rate = std::log(2.0) / 1000.0;  // median 1000 days at zero signal
  Eigen::VectorXd event_time(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    double u = rng.uniform01();
    while (u <= 0.0) u = rng.uniform01();
    event_time(i) = -std::log(u) / (base_rate * std::exp(log_hazard(i)));
  }

  Eigen::VectorXd observed = event_time;
  std::vector<int> events(static_cast<std::size_t>(n_samples), 1);
  double realized = 0.0;
  if (censor_rate > 0.0) {
    Eigen::VectorXd censor_unit(n_samples);
    for (int i = 0; i < n_samples; ++i) censor_unit(i) = rng.uniform01();
    const auto censored_fraction = [&](double horizon) {
      int c = 0;
      for (int i = 0; i < n_samples; ++i)
        if (censor_unit(i) * horizon < event_time(i)) ++c;
      return static_cast<double>(c) / static_cast<double>(n_samples);
    };
    double lo = 1e-9, hi = event_time.maxCoeff() * 1e6;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (censored_fraction(mid) > censor_rate)
        lo = mid;
      else
        hi = mid;
    }
    const double horizon = hi;
    realized = censored_fraction(horizon);
    if (std::fabs(realized - censor_rate) > 0.1)
      throw ValidationError("infeasible censor_rate " + std::to_string(censor_rate));
    for (int i = 0; i < n_samples; ++i) {
      const double c = censor_unit(i) * horizon;
      if (c < event_time(i)) {
        observed(i) = c;
        events[static_cast<std::size_t>(i)] = 0;
      }
    }
  }

  SyntheticCohort cohort;
  cohort.true_log_hazard = log_hazard;
  cohort.latent = latent;
  cohort.realized_censor_rate = realized;
  cohort.dataset.cancer_type = "SYNTH";
  cohort.dataset.expression.values = std::move(expression);
  cohort.dataset.expression.scale = Scale::Log2;
  for (int i = 0; i < n_samples; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "S%04d", i);
    cohort.dataset.expression.sample_ids.emplace_back(buf);
    cohort.dataset.clinical.sample_ids.emplace_back(buf);
  }
  for (int g = 0; g < n_genes; ++g) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "G%04d", g);
    cohort.dataset.expression.gene_ids.emplace_back(buf);
  }
  cohort.dataset.clinical.time = observed;
  cohort.dataset.clinical.event = std::move(events);
  return cohort;
}

// --- methods and grids ---------------------------------------------------------

enum class Method {
  CoxEN,
  CoxGBT,
  CoxNN,
  CLCoxEN,
  CLCoxGBT,
  CLCoxNN,
  Classifier,
  CLClassifier,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::CoxEN: return "cox_en";
    case Method::CoxGBT: return "cox_gbt";
    case Method::CoxNN: return "cox_nn";
    case Method::CLCoxEN: return "cl_cox_en";
    case Method::CLCoxGBT: return "cl_cox_gbt";
    case Method::CLCoxNN: return "cl_cox_nn";
    case Method::Classifier: return "classifier";
    case Method::CLClassifier: return "cl_classifier";
  }
  return "";
}

inline Method method_from_name(const std::string& name) {
  for (const Method m : {Method::CoxEN, Method::CoxGBT, Method::CoxNN, Method::CLCoxEN,
                         Method::CLCoxGBT, Method::CLCoxNN, Method::Classifier,
                         Method::CLClassifier}) {
    if (name == method_name(m)) return m;
  }
  throw ValidationError("unknown method '" + name + "'");
}

inline bool method_uses_cl(Method m) {
  return m == Method::CLCoxEN || m == Method::CLCoxGBT || m == Method::CLCoxNN ||
         m == Method::CLClassifier;
}

inline bool method_is_classifier(Method m) {
  return m == Method::Classifier || m == Method::CLClassifier;
}

enum class CoxKind { EN, GBT, NN };

inline CoxKind method_cox_kind(Method m) {
  switch (m) {
    case Method::CoxEN:
    case Method::CLCoxEN: return CoxKind::EN;
    case Method::CoxGBT:
    case Method::CLCoxGBT: return CoxKind::GBT;
    case Method::CoxNN:
    case Method::CLCoxNN: return CoxKind::NN;
    default: throw ValidationError("not a Cox method");
  }
}

struct CVGrid {
  // contrastive stage
  std::vector<std::vector<int>> cl_widths{{32, 16}};  // hidden..., embedding
  std::vector<double> cl_learning_rates{0.05};
  std::vector<double> cl_l2{1e-4};
  std::vector<int> tap_layers{1, 2};
  int stage1_keep = 5;
  // downstream stage
  std::vector<double> en_lambda{0.1};
  std::vector<double> en_alpha{0.5};
  std::vector<int> gbt_depth{3};
  std::vector<int> gbt_trees{100};
  std::vector<double> gbt_eta{0.1};
  std::vector<double> gbt_subsample{1.0};
  std::vector<std::vector<int>> nn_widths{{16}};
  std::vector<double> nn_learning_rates{0.05};
  std::vector<double> nn_l2{1e-4};
  int fold_count = 5;
};

struct StratifySpec {
  bool use_percentiles = false;
  double p_high = 0.73;
  double p_low = 0.51;
};

struct PipelineConfig {
  CVGrid grid;
  SupConConfig supcon;
  TrainConfig cl_train;      // lr / l2 replaced by grid candidates
  TrainConfig cox_nn_train;  // lr / l2 replaced by grid candidates
  SplitSpec split;
  StratifySpec stratify;
  int horizon_days = 1095;
  int ibs_min_risk_set = 20;
  double validation_fraction = 0.2;
};

using DownstreamModel = std::variant<CoxLinearModel, GBTEnsemble, CoxNeuralModel>;

inline Eigen::VectorXd predict_scores_any(const DownstreamModel& model,
                                          const Eigen::MatrixXd& x) {
  return std::visit(
      [&](const auto& m) -> Eigen::VectorXd {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, GBTEnsemble>)
          return predict_gbt(m, x);
        else
          return predict_scores(m, x);
      },
      model);
}

inline RiskOutput predict_risk(const GBTEnsemble& model, const Eigen::MatrixXd& x) {
  return make_risk_output(predict_gbt(model, x));
}

struct FittedMethod {
  Method method = Method::CoxEN;
  bool used_cl = false;
  MLPParams cl_params;
  int tap_layer = 0;
  DownstreamModel model;
  nlohmann::json selection;
};

inline Eigen::MatrixXd method_features(const FittedMethod& fitted, const Eigen::MatrixXd& x) {
  if (!fitted.used_cl) return x;
  return extract_features(fitted.cl_params, EmbeddingTap{fitted.tap_layer}, x);
}

// --- cross-validation -----------------------------------------------------------

// Seeded partition into near-equal folds (sizes differ by at most one).
inline std::vector<std::vector<int>> make_folds(int n, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("fold count must be >= 2");
  if (n < k) throw ValidationError("fold count exceeds sample count");
  Rng rng(seed);
  const std::vector<int> perm = rng.permutation(n);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  const int base = n / k;
  const int remainder = n % k;
  int pos = 0;
  for (int f = 0; f < k; ++f) {
    const int size = base + (f < remainder ? 1 : 0);
    folds[static_cast<std::size_t>(f)].assign(perm.begin() + pos, perm.begin() + pos + size);
    pos += size;
  }
  return folds;
}

namespace detail {

constexpr std::uint64_t kStage1FoldSeed = 0x5bf03635ULL;
constexpr std::uint64_t kStage2FoldSeed = 0x94d049bbULL;
constexpr std::uint64_t kRetrainValSeed = 0xbf58476dULL;
constexpr std::uint64_t kPoolValSeed = 0x2545f491ULL;

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

inline Eigen::VectorXd take(const Eigen::VectorXd& v, const std::vector<int>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(rows[i]);
  return out;
}

inline std::vector<int> take(const std::vector<int>& v, const std::vector<int>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const int r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}

// Carve a validation subset out of `rows` (for early stopping).
inline std::pair<std::vector<int>, std::vector<int>> carve_validation(
    const std::vector<int>& rows, double fraction, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> shuffled = rows;
  rng.shuffle(shuffled);
  int n_val = static_cast<int>(std::floor(fraction * static_cast<double>(rows.size())));
  n_val = std::clamp(n_val, 0, static_cast<int>(rows.size()) - 2);
  return {std::vector<int>(shuffled.begin() + n_val, shuffled.end()),
          std::vector<int>(shuffled.begin(), shuffled.begin() + n_val)};
}

struct CLCandidate {
  MLPArchitecture arch;
  TrainConfig train_cfg;
  nlohmann::json desc;
};

struct DownstreamCandidate {
  double en_lambda = 0.0;
  double en_alpha = 0.0;
  GBTConfig gbt;
  MLPArchitecture nn_arch;
  TrainConfig nn_cfg;
  nlohmann::json desc;
};

inline std::vector<CLCandidate> enumerate_cl_candidates(const CVGrid& grid, int input_width,
                                                        const TrainConfig& base) {
  if (grid.cl_widths.empty() || grid.cl_learning_rates.empty() || grid.cl_l2.empty())
    throw ValidationError("contrastive grid must not be empty");
  std::vector<CLCandidate> out;
  for (const auto& widths : grid.cl_widths) {
    if (widths.empty()) throw ValidationError("contrastive widths must not be empty");
    for (const double lr : grid.cl_learning_rates) {
      for (const double l2 : grid.cl_l2) {
        CLCandidate c;
        c.arch.layer_widths.push_back(input_width);
        for (const int w : widths) c.arch.layer_widths.push_back(w);
        c.train_cfg = base;
        c.train_cfg.learning_rate = lr;
        c.train_cfg.l2_weight = l2;
        c.desc = {{"widths", widths}, {"learning_rate", lr}, {"l2", l2}};
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

inline std::vector<DownstreamCandidate> enumerate_downstream(const CVGrid& grid, Method method,
                                                             int feature_width,
                                                             const TrainConfig& nn_base) {
  std::vector<DownstreamCandidate> out;
  if (method_is_classifier(method) || method_cox_kind(method) == CoxKind::GBT) {
    for (const int depth : grid.gbt_depth)
      for (const int trees : grid.gbt_trees)
        for (const double eta : grid.gbt_eta)
          for (const double sub : grid.gbt_subsample) {
            DownstreamCandidate c;
            c.gbt.max_depth = depth;
            c.gbt.n_trees = trees;
            c.gbt.learning_rate = eta;
            c.gbt.subsample = sub;
            c.desc = {{"max_depth", depth},
                      {"n_trees", trees},
                      {"learning_rate", eta},
                      {"subsample", sub}};
            out.push_back(std::move(c));
          }
  } else if (method_cox_kind(method) == CoxKind::EN) {
    for (const double lambda : grid.en_lambda)
      for (const double alpha : grid.en_alpha) {
        DownstreamCandidate c;
        c.en_lambda = lambda;
        c.en_alpha = alpha;
        c.desc = {{"lambda", lambda}, {"alpha", alpha}};
        out.push_back(std::move(c));
      }
  } else {
    for (const auto& widths : grid.nn_widths)
      for (const double lr : grid.nn_learning_rates)
        for (const double l2 : grid.nn_l2) {
          DownstreamCandidate c;
          c.nn_arch.layer_widths.push_back(feature_width);
          for (const int w : widths) c.nn_arch.layer_widths.push_back(w);
          c.nn_arch.layer_widths.push_back(1);
          c.nn_cfg = nn_base;
          c.nn_cfg.learning_rate = lr;
          c.nn_cfg.l2_weight = l2;
          c.desc = {{"widths", widths}, {"learning_rate", lr}, {"l2", l2}};
          out.push_back(std::move(c));
        }
  }
  if (out.empty()) throw ValidationError("downstream grid must not be empty");
  return out;
}

}  // namespace detail

struct CVOutcome {
  FittedMethod fitted;
  nlohmann::json selection;
};

// Two-stage cross-validated model selection over the training rows of a
// cohort, then a final refit on all training rows.
//
// Stage 1 (CL methods): k-fold CV over the contrastive grid ranks the
// candidates by mean held-out contrastive loss; the best stage1_keep nets
// are retrained on the full training set. Stage 2: k-fold CV jointly over
// (kept net, tap layer, downstream hyperparameters), scored by held-out
// partial likelihood (Cox) or log-loss (classifier).
inline CVOutcome cross_validate(const Eigen::MatrixXd& x, const Eigen::VectorXd& times,
                                const std::vector<int>& events,
                                const std::vector<int>& train_rows,
                                const SplitProvenance& provenance, Method method,
                                const PipelineConfig& cfg, std::uint64_t seed) {
  const int n_train = static_cast<int>(train_rows.size());
  if (n_train < cfg.grid.fold_count)
    throw ValidationError("training set smaller than the fold count");

  CVOutcome outcome;
  outcome.fitted.method = method;
  outcome.fitted.used_cl = method_uses_cl(method);

  // ---- stage 1: contrastive candidates -------------------------------------
  struct KeptNet {
    MLPParams params;
    nlohmann::json desc;
  };
  std::vector<KeptNet> kept_nets;
  if (outcome.fitted.used_cl) {
    std::vector<int> labels_global(static_cast<std::size_t>(x.rows()), -1);
    {
      const GroupLabeling labeling =
          assign_pfi_groups(detail::take(times, train_rows), cfg.supcon.target_group_size);
      for (std::size_t i = 0; i < train_rows.size(); ++i)
        labels_global[static_cast<std::size_t>(train_rows[i])] = labeling.labels[i];
    }
    auto candidates = detail::enumerate_cl_candidates(cfg.grid, static_cast<int>(x.cols()),
                                                      cfg.cl_train);
    for (auto& c : candidates) c.train_cfg.seed = seed;

    std::vector<double> mean_scores(candidates.size(), 0.0);
    if (candidates.size() > 1) {
      const auto folds =
          make_folds(n_train, cfg.grid.fold_count, seed ^ detail::kStage1FoldSeed);
      for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        double score_sum = 0.0;
        int score_n = 0;
        for (const auto& fold : folds) {
          std::vector<std::uint8_t> in_fold(static_cast<std::size_t>(n_train), 0);
          for (const int p : fold) in_fold[static_cast<std::size_t>(p)] = 1;
          std::vector<int> fit_rows, val_rows;
          for (int p = 0; p < n_train; ++p)
            (in_fold[static_cast<std::size_t>(p)] ? val_rows : fit_rows)
                .push_back(train_rows[static_cast<std::size_t>(p)]);
          provenance.require_train(fit_rows);
          provenance.require_train(val_rows);
          const MLPParams params =
              train_cl_indices(x, labels_global, fit_rows, val_rows, candidates[ci].arch,
                               candidates[ci].train_cfg, cfg.supcon);
          // held-out contrastive loss of the selected epoch
          Eigen::MatrixXd xv = detail::take_rows(x, val_rows);
          std::vector<int> lv;
          lv.reserve(val_rows.size());
          for (const int r : val_rows) lv.push_back(labels_global[static_cast<std::size_t>(r)]);
          try {
            score_sum +=
                supcon_loss(forward_batch(params, xv).back(), lv, cfg.supcon).loss;
            ++score_n;
          } catch (const Error&) {
            // degenerate fold: skip
          }
        }
        mean_scores[ci] = score_n > 0 ? score_sum / score_n
                                      : std::numeric_limits<double>::infinity();
      }
    }
    std::vector<std::size_t> rank(candidates.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(),
                     [&](std::size_t a, std::size_t b) { return mean_scores[a] < mean_scores[b]; });
    const std::size_t keep =
        std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(
                                                      std::max(1, cfg.grid.stage1_keep)));

    const auto [fit_rows, val_rows] = detail::carve_validation(
        train_rows, cfg.validation_fraction, seed ^ detail::kRetrainValSeed);
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = candidates[rank[k]];
      provenance.require_train(train_rows);
      KeptNet net;
      net.params = train_cl_indices(x, labels_global, fit_rows, val_rows, c.arch, c.train_cfg,
                                    cfg.supcon);
      net.desc = c.desc;
      net.desc["stage1_mean_val_loss"] =
          candidates.size() > 1 ? nlohmann::json(mean_scores[rank[k]]) : nlohmann::json();
      kept_nets.push_back(std::move(net));
    }
  }

  // ---- stage 2: joint selection over (net, tap, downstream) ----------------
  // Classifier methods select and fit on the labelable subset of the
  // training rows; Cox methods use all of them.
  std::vector<int> stage2_rows = train_rows;
  std::vector<int> stage2_labels;  // classifier only, aligned with stage2_rows
  if (method_is_classifier(method)) {
    ClinicalTable train_clin;
    train_clin.time = detail::take(times, train_rows);
    train_clin.event = detail::take(events, train_rows);
    train_clin.sample_ids.resize(train_rows.size());
    const ClassifierLabels lab = classifier_labeling(train_clin, cfg.horizon_days);
    stage2_rows.clear();
    for (std::size_t i = 0; i < lab.kept.size(); ++i) {
      stage2_rows.push_back(train_rows[static_cast<std::size_t>(lab.kept[i])]);
      stage2_labels.push_back(lab.labels[i]);
    }
    if (static_cast<int>(stage2_rows.size()) < cfg.grid.fold_count)
      throw ValidationError("too few labelable training samples for cross-validation");
  }

  std::vector<int> taps = cfg.grid.tap_layers;
  if (!outcome.fitted.used_cl) taps = {0};  // raw features: no tap dimension

  struct Stage2Candidate {
    int net = -1;
    int tap = 0;
    detail::DownstreamCandidate down;
  };
  std::vector<Stage2Candidate> stage2;
  const int raw_width = static_cast<int>(x.cols());
  for (std::size_t ni = 0; ni < (outcome.fitted.used_cl ? kept_nets.size() : 1); ++ni) {
    for (const int tap : taps) {
      int feat_width = raw_width;
      if (outcome.fitted.used_cl) {
        const auto& widths = kept_nets[ni].params.architecture().layer_widths;
        if (tap < 1 || tap >= static_cast<int>(widths.size())) continue;  // invalid for this net
        feat_width = widths[static_cast<std::size_t>(tap)];
      }
      for (const auto& d :
           detail::enumerate_downstream(cfg.grid, method, feat_width, cfg.cox_nn_train)) {
        Stage2Candidate c;
        c.net = outcome.fitted.used_cl ? static_cast<int>(ni) : -1;
        c.tap = tap;
        c.down = d;
        stage2.push_back(std::move(c));
      }
    }
  }
  if (stage2.empty()) throw ValidationError("no valid (net, tap, hyperparameter) candidate");

  // Feature matrices per (net, tap) pair, computed once over all rows.
  std::map<std::pair<int, int>, Eigen::MatrixXd> feature_cache;
  const auto features_of = [&](int net, int tap) -> const Eigen::MatrixXd& {
    const auto key = std::make_pair(net, tap);
    auto it = feature_cache.find(key);
    if (it == feature_cache.end()) {
      Eigen::MatrixXd f = net < 0 ? x
                                  : extract_features(kept_nets[static_cast<std::size_t>(net)].params,
                                                     EmbeddingTap{tap}, x);
      it = feature_cache.emplace(key, std::move(f)).first;
    }
    return it->second;
  };

  const auto fit_candidate = [&](const Stage2Candidate& c, const std::vector<int>& rows,
                                 const std::vector<int>& row_labels,
                                 std::uint64_t fit_seed) -> DownstreamModel {
    provenance.require_train(rows);
    const Eigen::MatrixXd f = detail::take_rows(features_of(c.net, c.tap), rows);
    if (method_is_classifier(method)) {
      GBTConfig g = c.down.gbt;
      g.seed = fit_seed;
      return fit_gbt_logistic(f, row_labels, g);
    }
    switch (method_cox_kind(method)) {
      case CoxKind::EN:
        return fit_cox_en(f, detail::take(times, rows), detail::take(events, rows),
                          c.down.en_lambda, c.down.en_alpha);
      case CoxKind::GBT: {
        GBTConfig g = c.down.gbt;
        g.seed = fit_seed;
        return fit_gbt_cox(f, detail::take(times, rows), detail::take(events, rows), g);
      }
      case CoxKind::NN: {
        detail::DownstreamCandidate d = c.down;
        MLPArchitecture arch = d.nn_arch;
        arch.layer_widths[0] = static_cast<int>(f.cols());
        TrainConfig nn_cfg = d.nn_cfg;
        nn_cfg.seed = fit_seed;
        return fit_cox_nn(f, detail::take(times, rows), detail::take(events, rows), arch, nn_cfg,
                          cfg.validation_fraction);
      }
    }
    throw Error("unreachable");
  };

  const auto score_candidate = [&](const Stage2Candidate& c, const DownstreamModel& model,
                                   const std::vector<int>& rows,
                                   const std::vector<int>& row_labels) -> std::optional<double> {
    const Eigen::MatrixXd f = detail::take_rows(features_of(c.net, c.tap), rows);
    const Eigen::VectorXd scores = predict_scores_any(model, f);
    if (method_is_classifier(method)) {
      double loss = 0.0;
      for (Eigen::Index i = 0; i < scores.size(); ++i) {
        const double p = std::clamp(sigmoid(scores(i)), 1e-12, 1.0 - 1e-12);
        loss -= row_labels[static_cast<std::size_t>(i)] == 1 ? std::log(p) : std::log(1.0 - p);
      }
      return loss / static_cast<double>(scores.size());
    }
    const std::vector<int> ev = detail::take(events, rows);
    if (std::accumulate(ev.begin(), ev.end(), 0) == 0) return std::nullopt;
    return neg_log_partial_likelihood(scores, detail::take(times, rows), ev).value /
           static_cast<double>(rows.size());
  };

  std::size_t best_idx = 0;
  std::vector<double> stage2_scores(stage2.size(), std::numeric_limits<double>::infinity());
  if (stage2.size() > 1) {
    const auto folds = make_folds(static_cast<int>(stage2_rows.size()), cfg.grid.fold_count,
                                  seed ^ detail::kStage2FoldSeed);
    for (std::size_t ci = 0; ci < stage2.size(); ++ci) {
      double sum = 0.0;
      int count = 0;
      for (std::size_t fi = 0; fi < folds.size(); ++fi) {
        std::vector<std::uint8_t> in_fold(stage2_rows.size(), 0);
        for (const int p : folds[fi]) in_fold[static_cast<std::size_t>(p)] = 1;
        std::vector<int> fit_rows, fit_labels, val_rows, val_labels;
        for (std::size_t p = 0; p < stage2_rows.size(); ++p) {
          if (in_fold[p]) {
            val_rows.push_back(stage2_rows[p]);
            if (!stage2_labels.empty()) val_labels.push_back(stage2_labels[p]);
          } else {
            fit_rows.push_back(stage2_rows[p]);
            if (!stage2_labels.empty()) fit_labels.push_back(stage2_labels[p]);
          }
        }
        try {
          const DownstreamModel model =
              fit_candidate(stage2[ci], fit_rows, fit_labels, seed + 7919 * fi);
          const auto s = score_candidate(stage2[ci], model, val_rows, val_labels);
          if (s.has_value()) {
            sum += *s;
            ++count;
          }
        } catch (const ValidationError&) {
          // fold unusable for this candidate (e.g. no events)
        }
      }
      if (count > 0) stage2_scores[ci] = sum / count;
    }
    best_idx = static_cast<std::size_t>(
        std::min_element(stage2_scores.begin(), stage2_scores.end()) - stage2_scores.begin());
    if (!std::isfinite(stage2_scores[best_idx]))
      throw Error("cross-validation failed: no candidate could be scored");
  }

  const Stage2Candidate& winner = stage2[best_idx];
  outcome.fitted.model = fit_candidate(winner, stage2_rows, stage2_labels, seed);
  if (outcome.fitted.used_cl) {
    outcome.fitted.cl_params = kept_nets[static_cast<std::size_t>(winner.net)].params;
    outcome.fitted.tap_layer = winner.tap;
  }

  outcome.selection = {{"method", method_name(method)},
                       {"downstream", winner.down.desc},
                       {"tap_layer", winner.tap}};
  if (outcome.fitted.used_cl)
    outcome.selection["contrastive"] = kept_nets[static_cast<std::size_t>(winner.net)].desc;
  if (stage2.size() > 1 && std::isfinite(stage2_scores[best_idx]))
    outcome.selection["stage2_mean_val_score"] = stage2_scores[best_idx];
  outcome.fitted.selection = outcome.selection;
  return outcome;
}

// --- single-repeat experiment ----------------------------------------------------

struct MethodArtifacts {
  FittedMethod fitted;
  BaselineHazard baseline;  // Cox methods
  std::vector<int> train_rows, test_rows;
  std::vector<double> train_hr;
  double cutoff_high = 0.0, cutoff_low = 0.0;
  KMCurve km_test_high, km_test_low;
  LogRankResult logrank;
  bool has_logrank = false;
  ROCCurve roc;  // classifier methods
  bool has_roc = false;
};

struct MethodRunResult {
  std::map<std::string, double> metrics;
  nlohmann::json selection;
  long leakage_checks = 0;
  std::optional<MethodArtifacts> artifacts;
};

inline MethodRunResult run_method_once(const CohortDataset& dataset, Method method,
                                       const PipelineConfig& cfg, std::uint64_t seed,
                                       bool collect_artifacts = false) {
  const Eigen::MatrixXd& x = dataset.expression.values;
  const Eigen::VectorXd& times = dataset.clinical.time;
  const std::vector<int>& events = dataset.clinical.event;
  const int n = static_cast<int>(x.rows());

  SplitSpec split_spec = cfg.split;
  split_spec.seed = seed;
  const IndexSplit split = split_indices(n, split_spec);
  const SplitProvenance provenance(n, split.train);

  const CVOutcome cv = cross_validate(x, times, events, split.train, provenance, method, cfg, seed);

  MethodRunResult result;
  result.selection = cv.selection;

  const Eigen::MatrixXd features = method_features(cv.fitted, x);
  const Eigen::MatrixXd f_train = detail::take_rows(features, split.train);
  const Eigen::MatrixXd f_test = detail::take_rows(features, split.test);
  const Eigen::VectorXd t_train = detail::take(times, split.train);
  const Eigen::VectorXd t_test = detail::take(times, split.test);
  const std::vector<int> e_train = detail::take(events, split.train);
  const std::vector<int> e_test = detail::take(events, split.test);

  MethodArtifacts artifacts;
  artifacts.fitted = cv.fitted;
  artifacts.train_rows = split.train;
  artifacts.test_rows = split.test;

  if (method_is_classifier(method)) {
    const Eigen::VectorXd raw_test = predict_scores_any(cv.fitted.model, f_test);
    result.metrics["c_index"] = concordance_index(raw_test, t_test, e_test);

    ClinicalTable test_clin;
    test_clin.time = t_test;
    test_clin.event = e_test;
    test_clin.sample_ids.resize(static_cast<std::size_t>(t_test.size()));
    const ClassifierLabels lab = classifier_labeling(test_clin, cfg.horizon_days);
    Eigen::VectorXd probs(static_cast<Eigen::Index>(lab.kept.size()));
    for (std::size_t i = 0; i < lab.kept.size(); ++i)
      probs(static_cast<Eigen::Index>(i)) = sigmoid(raw_test(lab.kept[i]));
    const bool both = std::count(lab.labels.begin(), lab.labels.end(), 1) > 0 &&
                      std::count(lab.labels.begin(), lab.labels.end(), 0) > 0;
    if (both) {
      const ROCCurve roc = roc_auc(probs, lab.labels);
      result.metrics["auc"] = roc.auc;
      artifacts.roc = roc;
      artifacts.has_roc = true;
    }
  } else {
    const Eigen::VectorXd s_train = predict_scores_any(cv.fitted.model, f_train);
    const Eigen::VectorXd s_test = predict_scores_any(cv.fitted.model, f_test);
    result.metrics["c_index"] = concordance_index(s_test, t_test, e_test);

    const BaselineHazard h0 = breslow_baseline(s_train, t_train, e_train);
    const Eigen::VectorXd hr_test = s_test.array().exp();
    result.metrics["ibs"] = integrated_brier_score(
        [&](Eigen::Index i, double t) { return std::exp(-h0.at(t) * hr_test(i)); }, t_test,
        e_test, t_train, e_train, cfg.ibs_min_risk_set);

    std::vector<double> train_hr(s_train.size()), test_hr(s_test.size());
    for (Eigen::Index i = 0; i < s_train.size(); ++i) train_hr[static_cast<std::size_t>(i)] = std::exp(s_train(i));
    for (Eigen::Index i = 0; i < s_test.size(); ++i) test_hr[static_cast<std::size_t>(i)] = std::exp(s_test(i));
    artifacts.baseline = h0;
    artifacts.train_hr = train_hr;

    std::vector<int> groups;
    if (cfg.stratify.use_percentiles) {
      groups = stratify_by_percentiles(train_hr, test_hr, cfg.stratify.p_high, cfg.stratify.p_low);
      artifacts.cutoff_high = percentile_linear(train_hr, cfg.stratify.p_high);
      artifacts.cutoff_low = percentile_linear(train_hr, cfg.stratify.p_low);
      for (auto& g : groups) g = g == 2 ? 1 : 0;  // KM export keeps two arms: high vs rest
    } else {
      groups = stratify_by_median_hr(train_hr, test_hr);
      artifacts.cutoff_high = artifacts.cutoff_low = percentile_linear(train_hr, 0.5);
    }
    std::vector<int> high_rows, low_rows;
    for (std::size_t i = 0; i < groups.size(); ++i)
      (groups[i] == 1 ? high_rows : low_rows).push_back(static_cast<int>(i));
    if (!high_rows.empty() && !low_rows.empty()) {
      const Eigen::VectorXd t_high = detail::take(t_test, high_rows);
      const Eigen::VectorXd t_low = detail::take(t_test, low_rows);
      const std::vector<int> e_high = detail::take(e_test, high_rows);
      const std::vector<int> e_low = detail::take(e_test, low_rows);
      int d = std::accumulate(e_high.begin(), e_high.end(), 0) +
              std::accumulate(e_low.begin(), e_low.end(), 0);
      if (d > 0) {
        artifacts.logrank = log_rank_test(t_high, e_high, t_low, e_low);
        artifacts.has_logrank = true;
        result.metrics["logrank_p"] = artifacts.logrank.p_value;
      }
      artifacts.km_test_high = km_estimator(t_high, e_high);
      artifacts.km_test_low = km_estimator(t_low, e_low);
    }
  }

  result.leakage_checks = provenance.checks.load();
  if (collect_artifacts) result.artifacts = std::move(artifacts);
  return result;
}

// --- pooled training --------------------------------------------------------------

struct PoolSpec {
  std::string name;
  std::vector<std::string> members;
};

struct PooledConfig {
  std::vector<int> cl_widths{32, 16};  // single contrastive architecture
  TrainConfig cl_train;
  SupConConfig supcon;
  CVGrid grid;  // taps + downstream hyperparameters
  SplitSpec split;
  Method method = Method::CLCoxEN;
  int ibs_min_risk_set = 20;
  double validation_fraction = 0.2;
};

struct PooledPerCancer {
  std::string cancer_type;
  std::vector<int> train_rows, test_rows;
  FittedMethod fitted;
  std::map<std::string, double> metrics;
};

struct PooledResult {
  MLPParams cl_params;
  std::vector<int> label_offsets;  // first group label of each cancer
  std::vector<PooledPerCancer> per_cancer;
  long leakage_checks = 0;
};

// Shared contrastive front end over the pooled training rows of all member
// cancers; group labels stay disjoint across cancers. Downstream models are
// selected and fitted per cancer on that cancer's own training rows.
inline PooledResult pooled_cl_train(const std::vector<CohortDataset>& datasets,
                                    const PoolSpec& pool, const PooledConfig& cfg,
                                    std::uint64_t seed) {
  if (datasets.empty()) throw ValidationError("pooled training needs at least one dataset");
  if (!method_uses_cl(cfg.method)) throw ValidationError("pooled training requires a CL method");
  for (const auto& ds : datasets) {
    if (ds.expression.gene_ids != datasets.front().expression.gene_ids)
      throw ValidationError("gene order mismatch between pooled cohorts (" + ds.cancer_type + ")");
  }
  (void)pool;

  const int n_genes = static_cast<int>(datasets.front().expression.n_genes());
  std::vector<IndexSplit> splits;
  std::vector<SplitProvenance> provenances;
  std::vector<std::vector<int>> labels_per_cancer;
  PooledResult result;

  int label_offset = 0;
  int pooled_rows = 0;
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    SplitSpec s = cfg.split;
    s.seed = seed + c;
    const IndexSplit split = split_indices(static_cast<int>(datasets[c].expression.n_samples()), s);
    provenances.emplace_back(static_cast<int>(datasets[c].expression.n_samples()), split.train);

    const GroupLabeling labeling = assign_pfi_groups(
        detail::take(datasets[c].clinical.time, split.train), cfg.supcon.target_group_size);
    std::vector<int> offset_labels(labeling.labels.size());
    for (std::size_t i = 0; i < labeling.labels.size(); ++i)
      offset_labels[i] = labeling.labels[i] + label_offset;
    result.label_offsets.push_back(label_offset);
    label_offset += labeling.m;

    pooled_rows += static_cast<int>(split.train.size());
    labels_per_cancer.push_back(std::move(offset_labels));
    splits.push_back(split);
  }

  // Pooled training matrix holds only train-tagged rows, by construction.
  Eigen::MatrixXd x_pool(pooled_rows, n_genes);
  std::vector<int> pool_labels(static_cast<std::size_t>(pooled_rows));
  {
    int r = 0;
    for (std::size_t c = 0; c < datasets.size(); ++c) {
      provenances[c].require_train(splits[c].train);
      for (std::size_t i = 0; i < splits[c].train.size(); ++i) {
        x_pool.row(r) = datasets[c].expression.values.row(splits[c].train[i]);
        pool_labels[static_cast<std::size_t>(r)] = labels_per_cancer[c][i];
        ++r;
      }
    }
  }

  std::vector<int> pool_positions(static_cast<std::size_t>(pooled_rows));
  std::iota(pool_positions.begin(), pool_positions.end(), 0);
  const auto [fit_pos, val_pos] = detail::carve_validation(
      pool_positions, cfg.validation_fraction, seed ^ detail::kPoolValSeed);

  MLPArchitecture arch;
  arch.layer_widths.push_back(n_genes);
  for (const int w : cfg.cl_widths) arch.layer_widths.push_back(w);
  TrainConfig tcfg = cfg.cl_train;
  tcfg.seed = seed;
  result.cl_params = train_cl_indices(x_pool, pool_labels, fit_pos, val_pos, arch, tcfg,
                                      cfg.supcon);

  // Per-cancer downstream selection with the shared front end fixed.
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    const auto& ds = datasets[c];
    PooledPerCancer per;
    per.cancer_type = ds.cancer_type;
    per.train_rows = splits[c].train;
    per.test_rows = splits[c].test;

    PipelineConfig stage2_cfg;
    stage2_cfg.grid = cfg.grid;
    stage2_cfg.grid.cl_widths = {cfg.cl_widths};
    stage2_cfg.supcon = cfg.supcon;
    stage2_cfg.cl_train = cfg.cl_train;
    stage2_cfg.ibs_min_risk_set = cfg.ibs_min_risk_set;
    stage2_cfg.validation_fraction = cfg.validation_fraction;

    // Reuse the stage-2 machinery of cross_validate by treating the shared
    // net as the only kept candidate: emulate via a direct method over the
    // extracted features of the best tap, selected by CV here.
    const Eigen::MatrixXd& x = ds.expression.values;
    const Eigen::VectorXd& times = ds.clinical.time;
    const std::vector<int>& events = ds.clinical.event;

    double best_score = std::numeric_limits<double>::infinity();
    int best_tap = cfg.grid.tap_layers.empty() ? result.cl_params.n_layers()
                                               : cfg.grid.tap_layers.front();
    nlohmann::json best_desc;

    const Method direct = method_is_classifier(cfg.method)
                              ? Method::Classifier
                              : (method_cox_kind(cfg.method) == CoxKind::EN
                                     ? Method::CoxEN
                                     : (method_cox_kind(cfg.method) == CoxKind::GBT
                                            ? Method::CoxGBT
                                            : Method::CoxNN));

    std::vector<int> valid_taps;
    for (const int tap : cfg.grid.tap_layers)
      if (tap >= 1 && tap <= result.cl_params.n_layers()) valid_taps.push_back(tap);
    if (valid_taps.empty()) valid_taps.push_back(result.cl_params.n_layers());

    CVOutcome chosen;
    for (const int tap : valid_taps) {
      const Eigen::MatrixXd feats = extract_features(result.cl_params, EmbeddingTap{tap}, x);
      CVOutcome cv = cross_validate(feats, times, events, splits[c].train, provenances[c],
                                    direct, stage2_cfg, seed + 31 * c);
      const double score = cv.selection.contains("stage2_mean_val_score")
                               ? cv.selection["stage2_mean_val_score"].get<double>()
                               : 0.0;
      if (score < best_score || best_desc.is_null()) {
        best_score = score;
        best_tap = tap;
        best_desc = cv.selection;
        chosen = std::move(cv);
      }
    }

    per.fitted.method = cfg.method;
    per.fitted.used_cl = true;
    per.fitted.cl_params = result.cl_params;
    per.fitted.tap_layer = best_tap;
    per.fitted.model = chosen.fitted.model;
    per.fitted.selection = best_desc;
    per.fitted.selection["tap_layer"] = best_tap;

    // test-set metrics
    const Eigen::MatrixXd feats = extract_features(result.cl_params, EmbeddingTap{best_tap}, x);
    const Eigen::MatrixXd f_train = detail::take_rows(feats, per.train_rows);
    const Eigen::MatrixXd f_test = detail::take_rows(feats, per.test_rows);
    const Eigen::VectorXd t_test = detail::take(times, per.test_rows);
    const std::vector<int> e_test = detail::take(events, per.test_rows);
    const Eigen::VectorXd s_test = predict_scores_any(per.fitted.model, f_test);
    per.metrics["c_index"] = concordance_index(s_test, t_test, e_test);
    result.leakage_checks += provenances[c].checks.load();
    result.per_cancer.push_back(std::move(per));
  }
  return result;
}

// --- repeat harness ------------------------------------------------------------------

struct AggregateStat {
  double mean = 0.0;
  std::optional<double> stddev;
  int n = 0;
};

struct VariantComparison {
  std::string variant_a, variant_b, metric;
  double u = 0.0;
  double p_value = 1.0;
};

struct RepeatOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::map<std::string, std::map<std::string, double>> metrics;  // variant -> metric -> value
};

struct ExperimentReport {
  std::uint64_t base_seed = 0;
  std::vector<RepeatOutcome> repeats;
  std::map<std::string, std::map<std::string, AggregateStat>> aggregates;
  std::vector<VariantComparison> comparisons;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["base_seed"] = base_seed;
    j["n_repeats"] = repeats.size();
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : repeats) {
      nlohmann::json rj{{"seed", r.seed}, {"ok", r.ok}};
      if (!r.ok) rj["error"] = r.error;
      rj["metrics"] = r.metrics;
      reps.push_back(std::move(rj));
    }
    j["repeats"] = std::move(reps);
    nlohmann::json agg;
    for (const auto& [variant, metrics] : aggregates) {
      nlohmann::json vj;
      for (const auto& [metric, stat] : metrics) {
        vj[metric] = {{"mean", stat.mean},
                      {"stddev", stat.stddev.has_value() ? nlohmann::json(*stat.stddev)
                                                         : nlohmann::json()},
                      {"n", stat.n}};
      }
      agg[variant] = std::move(vj);
    }
    j["aggregates"] = std::move(agg);
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : comparisons) {
      comps.push_back({{"variant_a", c.variant_a},
                       {"variant_b", c.variant_b},
                       {"metric", c.metric},
                       {"u", c.u},
                       {"p_value", c.p_value}});
    }
    j["comparisons"] = std::move(comps);
    return j;
  }
};

using RepeatFn =
    std::function<std::map<std::string, std::map<std::string, double>>(std::uint64_t seed)>;

// Runs the experiment closure with seeds base_seed .. base_seed + n - 1,
// aggregates per-variant metric means and standard deviations, and compares
// every variant pair with the rank-sum test. Failed repeats are recorded and
// excluded from aggregation.
inline ExperimentReport repeat_harness(const RepeatFn& experiment, int n_repeats,
                                       std::uint64_t base_seed, int workers = 1) {
  if (n_repeats < 1) throw ValidationError("n_repeats must be >= 1");
  ExperimentReport report;
  report.base_seed = base_seed;
  report.repeats.resize(static_cast<std::size_t>(n_repeats));

  const auto outcomes = run_jobs(n_repeats, workers, [&](int i) {
    RepeatOutcome& out = report.repeats[static_cast<std::size_t>(i)];
    out.seed = base_seed + static_cast<std::uint64_t>(i);
    out.metrics = experiment(out.seed);
    out.ok = true;
  });
  for (int i = 0; i < n_repeats; ++i) {
    if (!outcomes[static_cast<std::size_t>(i)].ok) {
      auto& r = report.repeats[static_cast<std::size_t>(i)];
      r.seed = base_seed + static_cast<std::uint64_t>(i);
      r.ok = false;
      r.error = outcomes[static_cast<std::size_t>(i)].error;
      r.metrics.clear();
    }
  }

  std::map<std::string, std::map<std::string, std::vector<double>>> series;
  for (const auto& r : report.repeats) {
    if (!r.ok) continue;
    for (const auto& [variant, metrics] : r.metrics)
      for (const auto& [metric, value] : metrics) series[variant][metric].push_back(value);
  }
  for (const auto& [variant, metrics] : series) {
    for (const auto& [metric, values] : metrics) {
      AggregateStat stat;
      stat.n = static_cast<int>(values.size());
      stat.mean = std::accumulate(values.begin(), values.end(), 0.0) / stat.n;
      if (stat.n >= 2) {
        double ss = 0.0;
        for (const double v : values) ss += (v - stat.mean) * (v - stat.mean);
        stat.stddev = std::sqrt(ss / (stat.n - 1));
      }
      report.aggregates[variant][metric] = stat;
    }
  }
  for (auto it_a = series.begin(); it_a != series.end(); ++it_a) {
    for (auto it_b = std::next(it_a); it_b != series.end(); ++it_b) {
      for (const auto& [metric, values_a] : it_a->second) {
        const auto it_m = it_b->second.find(metric);
        if (it_m == it_b->second.end()) continue;
        if (values_a.empty() || it_m->second.empty()) continue;
        const WilcoxonResult w = wilcoxon_rank_sum(values_a, it_m->second);
        report.comparisons.push_back({it_a->first, it_b->first, metric, w.u, w.p_value});
      }
    }
  }
  return report;
}

}  // namespace contrastsurv
