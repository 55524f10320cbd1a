#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stitchlab/config.hpp"
#include "stitchlab/selection.hpp"
#include "stitchlab/stitching.hpp"

namespace stitchlab {

/// One exhaustively finetuned configuration of the study pair.
struct StudyRow {
  StitchConfig config;
  StitchScore score;
  double accuracy = 0.0;
  double delta_accuracy = 0.0;  // target accuracy minus stitched accuracy
  bool in_klas = false;
  bool in_snnet = false;
  bool in_minkl = false;
};

/// Directional comparison of KLAS against the baselines for one seed, on the
/// smallest→largest anchor pair of the configuration.
struct SeedStudy {
  std::uint64_t seed = 0;
  std::string source_id;
  std::string target_id;
  double source_accuracy = 0.0;
  double target_accuracy = 0.0;
  std::vector<StudyRow> rows;

  std::size_t klas_size = 0;
  std::size_t snnet_size = 0;
  std::size_t minkl_size = 0;
  std::size_t equal_size = 0;

  double spearman_gamma = 0.0;
  double auc_klas = 0.0;           // full KLAS plan
  double auc_klas_equal = 0.0;     // KLAS at the SN-Net comparison size
  double auc_snnet_equal = 0.0;
  double auc_minkl = 0.0;

  std::vector<CascadePoint> cascade;
  std::size_t cascade_dominating = 0;  // KLAS points dominating their nearest cascade point
  double seconds = 0.0;

  bool rank_ok() const { return spearman_gamma >= 0.3; }
  bool beats_snnet() const { return auc_klas_equal >= auc_snnet_equal; }
  bool beats_minkl() const { return auc_klas >= auc_minkl; }
  bool dominates_cascade() const { return cascade_dominating == klas_size; }
};

SeedStudy run_study_seed(const ExperimentConfig& config, std::uint64_t seed, std::size_t threads = 1);

/// True when (fa, aa) is no worse than (fb, ab) in both FLOPs and accuracy.
bool weakly_dominates(double flops_a, double accuracy_a, double flops_b, double accuracy_b);

/// Index of the operating point whose FLOPs are closest to `flops` (first on ties).
std::size_t nearest_cascade_point(std::span<const CascadePoint> points, double flops);

void write_study_rows(const SeedStudy& study, const std::filesystem::path& path);
void write_study_summary(std::span<const SeedStudy> studies, const std::filesystem::path& path);

}  // namespace stitchlab
