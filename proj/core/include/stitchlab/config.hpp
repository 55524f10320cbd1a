#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/selection.hpp"

namespace stitchlab {

struct DatasetSpec {
  std::string kind = "blobs";  // blobs | spirals | idx
  std::size_t num_classes = 8;
  std::size_t per_class = 250;
  std::size_t input_dim = 16;
  double spread = 1.2;
  double noise = 0.2;
  std::string images;  // idx only
  std::string labels;  // idx only
  std::uint64_t seed = 7;
  double train_fraction = 0.75;
  double val_fraction = 0.125;
  double test_fraction = 0.125;
  std::uint64_t split_seed = 7;
};

struct AnchorSpec {
  std::string id;
  std::vector<StageSpec> stages;
  std::uint64_t seed = 0;
};

struct BudgetSpec {
  std::size_t epochs = 0;
  double lr = 0.0;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct SelectionSpec {
  PlanMethod method = PlanMethod::kKlas;
  double tau = 0.05;
  TauMode tau_mode = TauMode::kRelative;
  std::size_t num_buckets = 0;  // 0 = one per target block
  std::size_t minkl_k = 0;      // 0 = size of the KLAS plan
  SnnetMode snnet_mode = SnnetMode::kUnpaired;
  std::vector<double> cascade_thresholds;
};

struct ExperimentConfig {
  int schema_version = 1;
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<AnchorSpec> anchors;
  BudgetSpec anchor_training{50, 0.05, 64, 101};
  BudgetSpec probe_training{30, 0.1, 64, 202};
  BudgetSpec stitch_training{20, 0.05, 64, 303};
  std::size_t init_samples = 512;
  SelectionSpec selection;
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> ablation_taus{0.01, 0.05, 0.10};
  std::vector<std::size_t> ablation_buckets{2, 4, 8};
  std::string output_dir = "runs";
  std::size_t threads = 1;
};

/// The desk-scale default: 8-class 16-D blobs (2000 points), 1500/250/250 split, anchors
/// Ti (16×4), S (32×8), B (64×8).
ExperimentConfig default_config();

/// Parses and validates. Throws ConfigError naming the offending field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON (sorted keys, every field present).
std::string dump_config(const ExperimentConfig& config);
/// FNV-1a of the canonical dump.
std::uint64_t config_digest(const ExperimentConfig& config);

/// Throws ConfigError if an invariant is violated (τ ∈ [0,1], buckets ≥ 0, ids unique, ...).
void validate_config(const ExperimentConfig& config);

/// Builds the configured dataset (before splitting).
Dataset make_dataset(const DatasetSpec& spec, std::uint64_t run_seed);
/// Builds and splits the configured dataset.
Splits make_splits(const DatasetSpec& spec, std::uint64_t run_seed);

/// Component seed combined with the run seed.
std::uint64_t run_seed_for(std::uint64_t component_seed, std::uint64_t run_seed);

}  // namespace stitchlab
