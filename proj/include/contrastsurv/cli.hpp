#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "contrastsurv/data_model.hpp"
#include "contrastsurv/error.hpp"
#include "contrastsurv/executor.hpp"
#include "contrastsurv/manifest.hpp"
#include "contrastsurv/pipeline.hpp"
#include "contrastsurv/prognostic_model.hpp"
#include "contrastsurv/version.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

// Exit-code contract: 0 success, 1 runtime failure, 2 validation failure.
inline int cli_guard(const std::function<void()>& body, std::ostream& err = std::cerr) {
  try {
    body();
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

namespace detail {

inline void require_known_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                               const std::string& where) {
  if (!obj.is_object()) throw ValidationError("config section '" + where + "' must be an object");
  std::vector<std::string> offending;
  for (const auto& [key, value] : obj.items())
    if (allowed.find(key) == allowed.end()) offending.push_back(key);
  if (!offending.empty()) {
    std::string msg = "config: unknown keys in " + where + ":";
    for (const auto& k : offending) msg += " " + k;
    throw ValidationError(msg);
  }
}

template <typename T>
T get_or(const nlohmann::json& obj, const std::string& key, const T& fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: key '" + key + "' has the wrong type");
  }
}

inline std::filesystem::path ensure_out_dir(const std::string& out_dir) {
  std::filesystem::path dir(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory: " + out_dir);
  return dir;
}

}  // namespace detail

// --- prepare ----------------------------------------------------------------

struct PrepareOptions {
  std::string expression_path;
  std::string clinical_path;
  std::string out_dir;
  Orientation orientation = Orientation::GenesAsRows;
  std::string lengths_path;                  // set when the input is RPKM
  std::vector<std::string> reference_genes;  // housekeeping normalization
  double e_target = 0.0;
  std::string align_to_path;  // one gene id per line
  bool log2 = true;
  std::string cancer_type = "COHORT";
};

inline std::vector<std::string> read_gene_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open gene list: " + path);
  std::vector<std::string> genes;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) genes.push_back(line);
  }
  if (genes.empty()) throw ValidationError("gene list is empty: " + path);
  return genes;
}

inline std::map<std::string, double> read_gene_lengths(const std::string& path) {
  const std::string text = detail::read_text_file(path);
  std::istringstream in(text);
  std::map<std::string, double> lengths;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    const auto cells = detail::split_tabs(line);
    if (row == 1 && cells.size() >= 2 && cells[0] == "gene_id") continue;  // optional header
    if (cells.size() < 2) throw ValidationError("lengths row " + std::to_string(row) + " is short");
    lengths[std::string(cells[0])] = detail::parse_double(cells[1], row, 2);
  }
  return lengths;
}

inline void cmd_prepare(const PrepareOptions& opt) {
  const auto dir = detail::ensure_out_dir(opt.out_dir);

  RunManifest manifest;
  manifest.command = "prepare";
  manifest.config = {{"expression", opt.expression_path},
                     {"clinical", opt.clinical_path},
                     {"orientation", opt.orientation == Orientation::GenesAsRows
                                         ? "genes_as_rows"
                                         : "samples_as_rows"},
                     {"rpkm_lengths", opt.lengths_path},
                     {"reference_genes", opt.reference_genes},
                     {"e_target", opt.e_target},
                     {"align_to", opt.align_to_path},
                     {"log2", opt.log2},
                     {"cancer_type", opt.cancer_type}};
  manifest.input_digests.emplace_back(opt.expression_path, sha256_file(opt.expression_path));
  manifest.input_digests.emplace_back(opt.clinical_path, sha256_file(opt.clinical_path));
  if (!opt.lengths_path.empty())
    manifest.input_digests.emplace_back(opt.lengths_path, sha256_file(opt.lengths_path));
  if (!opt.align_to_path.empty())
    manifest.input_digests.emplace_back(opt.align_to_path, sha256_file(opt.align_to_path));
  manifest.output_paths = {"expression.tsv", "clinical.tsv", "prepare_report.json"};
  write_manifest(manifest, (dir / "manifest.json").string());

  ExpressionMatrix expr = load_expression_tsv(opt.expression_path, opt.orientation);
  nlohmann::json report;

  auto [nonneg, dropped_genes] = drop_negative_genes(expr);
  expr = std::move(nonneg);
  report["dropped_negative_genes"] = dropped_genes;

  if (!opt.lengths_path.empty()) {
    expr.scale = Scale::RPKM;
    expr = rpkm_to_counts(expr, read_gene_lengths(opt.lengths_path));
  }
  if (!opt.reference_genes.empty()) {
    auto [normalized, factor] = housekeeping_normalize(expr, opt.reference_genes, opt.e_target);
    expr = std::move(normalized);
    report["normalization"] = {{"reference_genes", factor.reference_genes},
                               {"e_target", factor.e_target},
                               {"e_cohort", factor.e_cohort},
                               {"factor", factor.factor}};
  }
  if (!opt.align_to_path.empty()) {
    auto [aligned, align_report] = align_genes(expr, read_gene_list(opt.align_to_path));
    expr = std::move(aligned);
    report["align"] = {{"matched", align_report.matched},
                       {"missing", align_report.missing},
                       {"dropped", align_report.dropped}};
  }
  if (opt.log2 && expr.scale != Scale::Log2) expr = log2_transform(expr);

  std::vector<std::string> missing_pfi;
  const ClinicalTable clinical = load_clinical_tsv(opt.clinical_path, &missing_pfi);
  auto [cohort, join_report] = join_cohort(expr, clinical, opt.cancer_type);
  for (const auto& id : missing_pfi) join_report.dropped_samples.push_back(id);
  report["dropped_samples"] = join_report.dropped_samples;
  report["n_samples"] = cohort.expression.n_samples();
  report["n_genes"] = cohort.expression.n_genes();

  write_expression_tsv(cohort.expression, (dir / "expression.tsv").string());
  write_clinical_tsv(cohort.clinical, (dir / "clinical.tsv").string());
  write_text_file((dir / "prepare_report.json").string(), report.dump(2) + "\n");
}

// --- run ----------------------------------------------------------------------

struct RunOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  int workers = 0;  // 0: CONTRASTSURV_WORKERS or hardware default
};

namespace detail {

inline CohortDataset dataset_from_config(const nlohmann::json& spec,
                                         RunManifest& manifest) {
  require_known_keys(spec, {"expression", "clinical", "cancer_type", "synthetic"}, "dataset");
  if (spec.contains("synthetic")) {
    const auto& syn = spec.at("synthetic");
    require_known_keys(
        syn, {"n_samples", "n_genes", "latent_dim", "signal_strength", "censor_rate", "seed"},
        "dataset.synthetic");
    return synthetic_cohort(get_or(syn, "n_samples", 200), get_or(syn, "n_genes", 100),
                            get_or(syn, "latent_dim", 5), get_or(syn, "signal_strength", 1.0),
                            get_or(syn, "censor_rate", 0.3),
                            get_or<std::uint64_t>(syn, "seed", 0))
        .dataset;
  }
  if (!spec.contains("expression") || !spec.contains("clinical"))
    throw ValidationError("config: dataset needs 'expression' and 'clinical' (or 'synthetic')");
  const std::string expr_path = spec.at("expression").get<std::string>();
  const std::string clin_path = spec.at("clinical").get<std::string>();
  manifest.input_digests.emplace_back(expr_path, sha256_file(expr_path));
  manifest.input_digests.emplace_back(clin_path, sha256_file(clin_path));
  ExpressionMatrix expr = load_expression_tsv(expr_path, Orientation::GenesAsRows);
  if (expr.scale != Scale::Log2)
    throw ValidationError("config: expression matrix is not log2-prepared; run `prepare` first");
  const ClinicalTable clinical = load_clinical_tsv(clin_path);
  auto [cohort, join_report] = join_cohort(expr, clinical, get_or<std::string>(spec, "cancer_type", "COHORT"));
  return cohort;
}

inline TrainConfig train_config_from(const nlohmann::json& j, const std::string& where,
                                     const TrainConfig& base) {
  require_known_keys(
      j, {"learning_rate", "l2_weight", "batch_size", "max_epochs", "patience", "seed"}, where);
  TrainConfig cfg = base;
  cfg.learning_rate = get_or(j, "learning_rate", cfg.learning_rate);
  cfg.l2_weight = get_or(j, "l2_weight", cfg.l2_weight);
  cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
  cfg.max_epochs = get_or(j, "max_epochs", cfg.max_epochs);
  cfg.patience = get_or(j, "patience", cfg.patience);
  return cfg;
}

inline PipelineConfig pipeline_config_from(const nlohmann::json& cfg_json) {
  PipelineConfig cfg;
  if (cfg_json.contains("supcon")) {
    const auto& sc = cfg_json.at("supcon");
    require_known_keys(
        sc, {"temperature", "target_group_size", "batch_size", "normalize_embeddings"}, "supcon");
    cfg.supcon.temperature = get_or(sc, "temperature", cfg.supcon.temperature);
    cfg.supcon.target_group_size = get_or(sc, "target_group_size", cfg.supcon.target_group_size);
    cfg.supcon.batch_size = get_or(sc, "batch_size", cfg.supcon.batch_size);
    cfg.supcon.normalize_embeddings =
        get_or(sc, "normalize_embeddings", cfg.supcon.normalize_embeddings);
  }
  cfg.cl_train.max_epochs = 200;
  cfg.cl_train.patience = 10;
  if (cfg_json.contains("cl_train"))
    cfg.cl_train = train_config_from(cfg_json.at("cl_train"), "cl_train", cfg.cl_train);
  cfg.cox_nn_train.max_epochs = 200;
  cfg.cox_nn_train.patience = 10;
  if (cfg_json.contains("cox_nn_train"))
    cfg.cox_nn_train = train_config_from(cfg_json.at("cox_nn_train"), "cox_nn_train",
                                         cfg.cox_nn_train);
  if (cfg_json.contains("grid")) {
    const auto& g = cfg_json.at("grid");
    require_known_keys(g,
                       {"cl_widths", "cl_learning_rates", "cl_l2", "tap_layers", "stage1_keep",
                        "en_lambda", "en_alpha", "gbt_depth", "gbt_trees", "gbt_eta",
                        "gbt_subsample", "nn_widths", "nn_learning_rates", "nn_l2", "fold_count"},
                       "grid");
    CVGrid& grid = cfg.grid;
    grid.cl_widths = get_or(g, "cl_widths", grid.cl_widths);
    grid.cl_learning_rates = get_or(g, "cl_learning_rates", grid.cl_learning_rates);
    grid.cl_l2 = get_or(g, "cl_l2", grid.cl_l2);
    grid.tap_layers = get_or(g, "tap_layers", grid.tap_layers);
    grid.stage1_keep = get_or(g, "stage1_keep", grid.stage1_keep);
    grid.en_lambda = get_or(g, "en_lambda", grid.en_lambda);
    grid.en_alpha = get_or(g, "en_alpha", grid.en_alpha);
    grid.gbt_depth = get_or(g, "gbt_depth", grid.gbt_depth);
    grid.gbt_trees = get_or(g, "gbt_trees", grid.gbt_trees);
    grid.gbt_eta = get_or(g, "gbt_eta", grid.gbt_eta);
    grid.gbt_subsample = get_or(g, "gbt_subsample", grid.gbt_subsample);
    grid.nn_widths = get_or(g, "nn_widths", grid.nn_widths);
    grid.nn_learning_rates = get_or(g, "nn_learning_rates", grid.nn_learning_rates);
    grid.nn_l2 = get_or(g, "nn_l2", grid.nn_l2);
    grid.fold_count = get_or(g, "fold_count", grid.fold_count);
  }
  if (cfg_json.contains("stratify")) {
    const auto& s = cfg_json.at("stratify");
    require_known_keys(s, {"kind", "p_high", "p_low"}, "stratify");
    const std::string kind = get_or<std::string>(s, "kind", "median");
    if (kind == "percentile")
      cfg.stratify.use_percentiles = true;
    else if (kind != "median")
      throw ValidationError("config: stratify.kind must be 'median' or 'percentile'");
    cfg.stratify.p_high = get_or(s, "p_high", cfg.stratify.p_high);
    cfg.stratify.p_low = get_or(s, "p_low", cfg.stratify.p_low);
  }
  cfg.split.train_fraction = get_or(cfg_json, "train_fraction", cfg.split.train_fraction);
  cfg.horizon_days = get_or(cfg_json, "horizon_days", cfg.horizon_days);
  cfg.ibs_min_risk_set = get_or(cfg_json, "ibs_min_risk_set", cfg.ibs_min_risk_set);
  return cfg;
}

}  // namespace detail

inline void cmd_run(const RunOptions& opt) {
  std::ifstream cfg_in(opt.config_path);
  if (!cfg_in) throw ValidationError("cannot open config: " + opt.config_path);
  nlohmann::json cfg_json;
  try {
    cfg_in >> cfg_json;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config is not valid JSON: " + std::string(e.what()));
  }

  detail::require_known_keys(
      cfg_json,
      {"dataset", "method", "methods", "n_repeats", "base_seed", "train_fraction",
       "horizon_days", "ibs_min_risk_set", "stratify", "supcon", "cl_train", "cox_nn_train",
       "grid", "workers"},
      "top level");
  if (!cfg_json.contains("dataset")) throw ValidationError("config: missing key dataset");
  if (cfg_json.contains("method") == cfg_json.contains("methods"))
    throw ValidationError("config: provide exactly one of 'method' or 'methods'");

  std::vector<Method> methods;
  if (cfg_json.contains("method")) {
    methods.push_back(method_from_name(cfg_json.at("method").get<std::string>()));
  } else {
    for (const auto& name : cfg_json.at("methods"))
      methods.push_back(method_from_name(name.get<std::string>()));
  }
  if (methods.empty()) throw ValidationError("config: methods must not be empty");

  const int n_repeats = detail::get_or(cfg_json, "n_repeats", 1);
  if (n_repeats < 1) throw ValidationError("config: n_repeats must be >= 1");
  std::uint64_t base_seed = detail::get_or<std::uint64_t>(cfg_json, "base_seed", 0);
  if (opt.seed_override.has_value()) base_seed = *opt.seed_override;
  int workers = opt.workers > 0 ? opt.workers : detail::get_or(cfg_json, "workers", 0);
  if (workers <= 0) workers = default_worker_count();

  const auto dir = detail::ensure_out_dir(opt.out_dir);
  RunManifest manifest;
  manifest.command = "run";
  nlohmann::json resolved = cfg_json;
  resolved["base_seed"] = base_seed;
  manifest.config = resolved;
  manifest.seed = base_seed;

  const CohortDataset dataset = detail::dataset_from_config(cfg_json.at("dataset"), manifest);
  const PipelineConfig cfg = detail::pipeline_config_from(cfg_json);

  manifest.output_paths.push_back("report.json");
  for (const Method m : methods)
    manifest.output_paths.push_back("model_" + std::string(method_name(m)) + ".json");
  write_manifest(manifest, (dir / "manifest.json").string());

  std::mutex artifacts_mutex;
  std::map<std::string, MethodArtifacts> artifacts;
  std::map<std::string, nlohmann::json> selections;
  std::atomic<long> leakage_checks{0};

  const RepeatFn experiment = [&](std::uint64_t seed) {
    std::map<std::string, std::map<std::string, double>> out;
    const bool collect = seed == base_seed;
    for (const Method m : methods) {
      MethodRunResult r = run_method_once(dataset, m, cfg, seed, collect);
      leakage_checks.fetch_add(r.leakage_checks);
      out[method_name(m)] = r.metrics;
      if (collect && r.artifacts.has_value()) {
        const std::lock_guard<std::mutex> lock(artifacts_mutex);
        artifacts[method_name(m)] = std::move(*r.artifacts);
        selections[method_name(m)] = r.selection;
      }
    }
    return out;
  };

  const ExperimentReport report = repeat_harness(experiment, n_repeats, base_seed, workers);

  nlohmann::json report_json = report.to_json();
  report_json["toolkit_version"] = kVersion;
  report_json["config"] = resolved;
  report_json["leakage_checks"] = leakage_checks.load();
  nlohmann::json methods_json = nlohmann::json::array();
  for (const Method m : methods) methods_json.push_back(method_name(m));
  report_json["methods"] = methods_json;
  report_json["selections"] = selections;

  nlohmann::json curves = nlohmann::json::object();
  for (const Method m : methods) {
    const std::string name = method_name(m);
    const auto it = artifacts.find(name);
    if (it == artifacts.end()) continue;
    const MethodArtifacts& a = it->second;

    PrognosticModel model;
    model.method = name;
    model.gene_order = dataset.expression.gene_ids;
    model.used_cl = a.fitted.used_cl;
    model.cl_params = a.fitted.cl_params;
    model.tap_layer = a.fitted.tap_layer;
    model.model = a.fitted.model;
    if (!method_is_classifier(m)) {
      model.has_baseline = true;
      model.baseline = a.baseline;
      model.cutoff_kind = cfg.stratify.use_percentiles ? "percentile" : "median";
      model.cutoff_high = a.cutoff_high;
      model.cutoff_low = a.cutoff_low;
      // Stored through the same path `predict` takes, so re-scoring the
      // training set reproduces these values bit for bit.
      const ExpressionMatrix train_expr =
          subset_cohort(dataset, a.train_rows).expression;
      const PredictionResult scored = predict_with_model(model, train_expr);
      for (const auto& row : scored.rows) model.training_hr.emplace_back(row.sample_id, row.hr);
    } else {
      model.cutoff_kind = "median";
      model.cutoff_high = model.cutoff_low = 1.0;  // log-odds 0
    }
    write_text_file((dir / ("model_" + name + ".json")).string(),
                    prognostic_model_to_json(model).dump(2) + "\n");

    if (a.has_roc) {
      const std::string file = "roc_" + name + ".csv";
      write_roc_csv(a.roc, (dir / file).string());
      curves[name]["roc"] = file;
    }
    if (!a.km_test_high.times.empty() || !a.km_test_low.times.empty()) {
      const std::string high_file = "km_test_high_" + name + ".csv";
      const std::string low_file = "km_test_low_" + name + ".csv";
      write_km_csv(a.km_test_high, (dir / high_file).string());
      write_km_csv(a.km_test_low, (dir / low_file).string());
      curves[name]["km_high"] = high_file;
      curves[name]["km_low"] = low_file;
    }
  }
  report_json["curves"] = curves;
  write_text_file((dir / "report.json").string(), report_json.dump(2) + "\n");

  for (std::size_t i = 0; i < report.repeats.size(); ++i) {
    if (!report.repeats[i].ok)
      throw Error("repeat " + std::to_string(i) + " failed: " + report.repeats[i].error);
  }
}

// --- predict ------------------------------------------------------------------

struct PredictOptions {
  std::string model_path;
  std::string expression_path;
  std::string out_path;
  std::vector<double> survival_times;
};

inline void cmd_predict(const PredictOptions& opt) {
  std::ifstream in(opt.model_path);
  if (!in) throw ValidationError("cannot open model: " + opt.model_path);
  nlohmann::json model_json;
  try {
    in >> model_json;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model file is not valid JSON: " + std::string(e.what()));
  }
  const PrognosticModel model = prognostic_model_from_json(model_json);
  const ExpressionMatrix expr = load_expression_tsv(opt.expression_path, Orientation::GenesAsRows);
  const PredictionResult result = predict_with_model(model, expr, opt.survival_times);
  if (result.align.dropped > 0)
    std::cerr << "note: dropped " << result.align.dropped
              << " genes unknown to the model; zero-filled " << result.align.missing << "\n";

  std::ofstream out(opt.out_path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + opt.out_path);
  out << "sample_id\tlog_hr\thr\trisk_group";
  for (const double t : opt.survival_times) out << "\tsurv_" << detail::format_double(t);
  out << '\n';
  for (const auto& row : result.rows) {
    out << row.sample_id << '\t' << detail::format_double(row.log_hr) << '\t'
        << detail::format_double(row.hr) << '\t' << row.risk_group;
    if (model.has_baseline)
      for (const double s : row.survival) out << '\t' << detail::format_double(s);
    else
      for (std::size_t k = 0; k < opt.survival_times.size(); ++k) out << "\tNA";
    out << '\n';
  }
}

// --- simulate -----------------------------------------------------------------

struct SimulateOptions {
  std::string out_dir;
  int n_samples = 300;
  int n_genes = 500;
  int latent_dim = 5;
  double signal_strength = 2.0;
  double censor_rate = 0.4;
  std::uint64_t seed = 0;
};

inline void cmd_simulate(const SimulateOptions& opt) {
  const auto dir = detail::ensure_out_dir(opt.out_dir);
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.seed = opt.seed;
  manifest.config = {{"n_samples", opt.n_samples},       {"n_genes", opt.n_genes},
                     {"latent_dim", opt.latent_dim},     {"signal_strength", opt.signal_strength},
                     {"censor_rate", opt.censor_rate},   {"seed", opt.seed}};
  manifest.output_paths = {"expression.tsv", "clinical.tsv", "truth.tsv"};
  write_manifest(manifest, (dir / "manifest.json").string());

  const SyntheticCohort cohort =
      synthetic_cohort(opt.n_samples, opt.n_genes, opt.latent_dim, opt.signal_strength,
                       opt.censor_rate, opt.seed);
  write_expression_tsv(cohort.dataset.expression, (dir / "expression.tsv").string());
  write_clinical_tsv(cohort.dataset.clinical, (dir / "clinical.tsv").string());

  std::ofstream truth((dir / "truth.tsv").string(), std::ios::binary);
  if (!truth) throw Error("cannot write truth file");
  truth << "sample_id\tlog_hazard\n";
  for (Eigen::Index i = 0; i < cohort.true_log_hazard.size(); ++i)
    truth << cohort.dataset.expression.sample_ids[static_cast<std::size_t>(i)] << '\t'
          << detail::format_double(cohort.true_log_hazard(i)) << '\n';
}

}  // namespace contrastsurv
