#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "contrastsurv/cox.hpp"
#include "contrastsurv/data_model.hpp"
#include "contrastsurv/error.hpp"
#include "contrastsurv/pipeline.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

// Everything needed to score new cohorts: the gene order the model was
// trained on, the optional contrastive front end, the downstream model, the
// baseline hazard, and the risk cutoffs frozen from the training data.
struct PrognosticModel {
  std::string method;
  std::vector<std::string> gene_order;
  bool used_cl = false;
  MLPParams cl_params;
  int tap_layer = 0;
  DownstreamModel model;
  bool has_baseline = false;
  BaselineHazard baseline;
  std::string cutoff_kind = "median";  // "median" or "percentile"
  double cutoff_high = 0.0;
  double cutoff_low = 0.0;
  std::vector<std::pair<std::string, double>> training_hr;  // sample id, HR
};

inline nlohmann::json downstream_to_json(const DownstreamModel& model) {
  return std::visit(
      [](const auto& m) -> nlohmann::json {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, CoxLinearModel>) {
          return cox_linear_to_json(m);
        } else if constexpr (std::is_same_v<T, GBTEnsemble>) {
          return gbt_to_json(m);
        } else {
          return nlohmann::json{{"type", "neural"}, {"mlp", mlp_to_json(m.mlp)}};
        }
      },
      model);
}

inline DownstreamModel downstream_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "linear") return cox_linear_from_json(j);
  if (type == "boosted") return gbt_from_json(j);
  if (type == "neural") {
    CoxNeuralModel m;
    m.mlp = mlp_from_json(j.at("mlp"));
    return m;
  }
  throw ValidationError("unknown model type '" + type + "'");
}

inline nlohmann::json prognostic_model_to_json(const PrognosticModel& m) {
  nlohmann::json j;
  j["format"] = "contrastsurv.model";
  j["version"] = 1;
  j["method"] = m.method;
  j["gene_order"] = m.gene_order;
  j["used_cl"] = m.used_cl;
  if (m.used_cl) {
    j["cl"] = mlp_to_json(m.cl_params);
    j["tap_layer"] = m.tap_layer;
  }
  j["model"] = downstream_to_json(m.model);
  if (m.has_baseline) j["baseline"] = baseline_to_json(m.baseline);
  j["cutoffs"] = {{"kind", m.cutoff_kind}, {"high", m.cutoff_high}, {"low", m.cutoff_low}};
  nlohmann::json hr = nlohmann::json::array();
  for (const auto& [id, value] : m.training_hr) hr.push_back({{"sample_id", id}, {"hr", value}});
  j["training_hr"] = std::move(hr);
  return j;
}

inline PrognosticModel prognostic_model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "contrastsurv.model")
    throw ValidationError("not a prognostic model document");
  PrognosticModel m;
  m.method = j.at("method").get<std::string>();
  m.gene_order = j.at("gene_order").get<std::vector<std::string>>();
  m.used_cl = j.at("used_cl").get<bool>();
  if (m.used_cl) {
    m.cl_params = mlp_from_json(j.at("cl"));
    m.tap_layer = j.at("tap_layer").get<int>();
  }
  m.model = downstream_from_json(j.at("model"));
  if (j.contains("baseline")) {
    m.baseline = baseline_from_json(j.at("baseline"));
    m.has_baseline = true;
  }
  m.cutoff_kind = j.at("cutoffs").at("kind").get<std::string>();
  m.cutoff_high = j.at("cutoffs").at("high").get<double>();
  m.cutoff_low = j.at("cutoffs").at("low").get<double>();
  for (const auto& row : j.at("training_hr"))
    m.training_hr.emplace_back(row.at("sample_id").get<std::string>(),
                               row.at("hr").get<double>());
  return m;
}

struct PredictionRow {
  std::string sample_id;
  double log_hr = 0.0;
  double hr = 0.0;
  std::string risk_group;
  std::vector<double> survival;  // at the requested times, Cox models only
};

struct PredictionResult {
  std::vector<PredictionRow> rows;
  AlignReport align;
};

// Scores a cohort: aligns genes to the training order (unknown genes are
// dropped, absent genes zero-filled), applies the optional contrastive
// front end, and assigns risk groups from the stored cutoffs.
inline PredictionResult predict_with_model(const PrognosticModel& model,
                                           const ExpressionMatrix& expression,
                                           const std::vector<double>& survival_times = {}) {
  if (expression.scale != Scale::Log2)
    throw ValidationError("prediction expects a prepared (log2) expression matrix");
  auto [aligned, report] = align_genes(expression, model.gene_order);

  Eigen::MatrixXd features = aligned.values;
  if (model.used_cl)
    features = extract_features(model.cl_params, EmbeddingTap{model.tap_layer}, features);
  const Eigen::VectorXd scores = predict_scores_any(model.model, features);

  PredictionResult result;
  result.align = std::move(report);
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    PredictionRow row;
    row.sample_id = aligned.sample_ids[static_cast<std::size_t>(i)];
    row.log_hr = scores(i);
    row.hr = std::exp(scores(i));
    if (model.cutoff_kind == "percentile") {
      row.risk_group = row.hr >= model.cutoff_high ? "high"
                       : row.hr >= model.cutoff_low ? "medium"
                                                    : "low";
    } else {
      row.risk_group = row.hr > model.cutoff_high ? "high" : "low";
    }
    if (model.has_baseline) {
      for (const double t : survival_times)
        row.survival.push_back(std::exp(-model.baseline.at(t) * row.hr));
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace contrastsurv
