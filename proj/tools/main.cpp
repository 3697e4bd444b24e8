#include <CLI11.hpp>

#include <optional>
#include <string>
#include <vector>

#include "contrastsurv/cli.hpp"
#include "contrastsurv/version.hpp"

namespace cs = contrastsurv;

int main(int argc, char** argv) {
  CLI::App app{"contrastsurv: contrastive survival-analysis toolkit"};
  app.set_version_flag("--version", cs::kVersion);
  app.require_subcommand(1);

  // prepare
  cs::PrepareOptions prepare;
  bool samples_as_rows = false;
  bool no_log2 = false;
  auto* prep = app.add_subcommand("prepare", "ingest and normalize a cohort");
  prep->add_option("--expression", prepare.expression_path, "expression TSV (.gz accepted)")
      ->required();
  prep->add_option("--clinical", prepare.clinical_path, "clinical TSV")->required();
  prep->add_option("--out", prepare.out_dir, "output directory")->required();
  prep->add_flag("--samples-as-rows", samples_as_rows, "matrix rows are samples, not genes");
  prep->add_option("--rpkm-lengths", prepare.lengths_path,
                   "gene-length TSV; input is treated as RPKM and converted to counts");
  prep->add_option("--reference-genes", prepare.reference_genes,
                   "housekeeping genes for normalization")
      ->delimiter(',');
  prep->add_option("--e-target", prepare.e_target, "target mean reference expression");
  prep->add_option("--align-to", prepare.align_to_path, "gene order file (one id per line)");
  prep->add_flag("--no-log2", no_log2, "skip the log2(1+x) transform");
  prep->add_option("--cancer-type", prepare.cancer_type, "cohort tag");

  // run
  cs::RunOptions run;
  std::int64_t run_seed = -1;
  auto* runc = app.add_subcommand("run", "run a configured experiment");
  runc->add_option("--config", run.config_path, "experiment config JSON")->required();
  runc->add_option("--out", run.out_dir, "output directory")->required();
  runc->add_option("--seed", run_seed, "override the config base seed");
  runc->add_option("--workers", run.workers, "parallel repeat workers");

  // predict
  cs::PredictOptions predict;
  auto* pred = app.add_subcommand("predict", "score a prepared cohort with a saved model");
  pred->add_option("--model", predict.model_path, "model JSON from `run`")->required();
  pred->add_option("--data", predict.expression_path, "prepared expression TSV")->required();
  pred->add_option("--out", predict.out_path, "predictions TSV")->required();
  pred->add_option("--times", predict.survival_times, "times for survival probabilities")
      ->delimiter(',');

  // simulate
  cs::SimulateOptions simulate;
  auto* sim = app.add_subcommand("simulate", "generate a synthetic cohort bundle");
  sim->add_option("--out", simulate.out_dir, "output directory")->required();
  sim->add_option("--n-samples", simulate.n_samples, "cohort size");
  sim->add_option("--n-genes", simulate.n_genes, "gene count");
  sim->add_option("--latent-dim", simulate.latent_dim, "latent dimension");
  sim->add_option("--signal", simulate.signal_strength, "hazard signal strength");
  sim->add_option("--censor-rate", simulate.censor_rate, "target censoring fraction");
  sim->add_option("--seed", simulate.seed, "random seed");

  CLI11_PARSE(app, argc, argv);

  if (prep->parsed()) {
    if (samples_as_rows) prepare.orientation = cs::Orientation::SamplesAsRows;
    prepare.log2 = !no_log2;
    return cs::cli_guard([&] { cs::cmd_prepare(prepare); });
  }
  if (runc->parsed()) {
    if (run_seed >= 0) run.seed_override = static_cast<std::uint64_t>(run_seed);
    return cs::cli_guard([&] { cs::cmd_run(run); });
  }
  if (pred->parsed()) return cs::cli_guard([&] { cs::cmd_predict(predict); });
  if (sim->parsed()) return cs::cli_guard([&] { cs::cmd_simulate(simulate); });
  return 0;
}
