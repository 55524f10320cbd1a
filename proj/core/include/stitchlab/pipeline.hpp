#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stitchlab/config.hpp"
#include "stitchlab/selection.hpp"

namespace stitchlab {

/// Command-line overrides applied on top of a loaded configuration.
struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<PlanMethod> method;
  std::optional<double> tau;
  std::optional<std::size_t> buckets;
  std::optional<std::size_t> threads;
};

/// Applies overrides and re-validates.
ExperimentConfig apply_overrides(ExperimentConfig config, const RunOverrides& overrides);

/// Digest of everything upstream of selection (dataset, anchors, budgets) plus the run seed.
std::uint64_t run_digest(const ExperimentConfig& config, std::uint64_t run_seed);

/// Staged experiment over one run directory `<output_dir>/run-<run digest>`.
///
/// Layout:
///   data/dataset.json
///   anchors/<id>.json, anchors/<id>_loss.csv
///   probes/<id>.json, probes/<id>_trace.csv
///   similarity/<src>__<tgt>.json, similarity/<src>__<tgt>_stage<k>.csv, similarity/anchor_pairs.csv
///   plans/<method>.json, plans/klas_scores.csv
///   stitches/<method>/<src>__<tgt>.init.json, .final.json, _trace.csv
///   results/eval_<method>.csv (+ .json), results/anchors.csv, results/cascade.csv (+ .json)
///   oracle/exhaustive.csv, oracle/metrics.csv (+ .json)
///   report/{pareto,correlations,overlap,curves}.csv, report/auc.json
///   ablations/tau.csv, ablations/buckets.csv and their plans
///   study/seed_<s>.csv, study/summary.csv
///
/// Every JSON artifact records an `inputs_digest` over the files it was built
/// from; later stages recompute it and raise StaleArtifact on mismatch.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  std::uint64_t run_seed() const { return run_seed_; }
  const std::filesystem::path& dir() const { return dir_; }

  void gen_data();
  void train_anchors();
  void train_probes();
  void similarity();
  void select(PlanMethod method);
  void init_stitches(PlanMethod method);
  void finetune(PlanMethod method);
  void evaluate(PlanMethod method);
  void oracle();
  void report();
  void ablate_tau();
  void ablate_buckets();
  /// Directional KLAS-vs-baselines study over every configured seed.
  void study();
  /// Every stage in order for every selection method, then the report.
  void run_all();

  /// Dispatches a subcommand name. Throws ConfigError for unknown names.
  void run(const std::string& stage);
  static const std::vector<std::string>& stage_names();

 private:
  ExperimentConfig config_;
  std::uint64_t run_seed_ = 0;
  std::filesystem::path dir_;
};

/// Process exit code for an exception escaping a stage: 2 config, 3 missing
/// or stale artifact, 4 numeric failure, 1 otherwise.
int exit_code_for(const std::exception& error);

/// FNV-1a over a file's bytes. Throws MissingArtifact if it cannot be read.
std::uint64_t file_digest(const std::filesystem::path& path);

}  // namespace stitchlab
