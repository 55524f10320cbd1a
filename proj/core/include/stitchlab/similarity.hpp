#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/probenet.hpp"
#include "stitchlab/tensor.hpp"

namespace stitchlab {

/// Σ_k p_k·ln((p_k+ε)/(q_k+ε)) with ε = 1e-12.
double kl_divergence(std::span<const double> p, std::span<const double> q);
double kl_divergence(const ProbDist& p, const ProbDist& q);

/// Mean over rows of KL(p_row ‖ q_row). Throws InvalidInput on an empty batch.
double mean_kl(const Tensor& p, const Tensor& q);

/// Θ(P^f_i, P^g_j): mean KL over the validation set, source probe as p.
double theta(const ProbeSet& source_probes, const AnchorModel& source, const ProbeSet& target_probes,
             const AnchorModel& target, std::size_t source_block, std::size_t target_block, const Dataset& val);

/// Θ for every (source block, target block) pair of one shared stage.
struct SimilarityMatrix {
  std::string source_id;
  std::string target_id;
  std::uint64_t source_digest = 0;
  std::uint64_t target_digest = 0;
  std::size_t stage = 0;
  std::vector<std::size_t> source_blocks;  // 1-based block indices, ascending
  std::vector<std::size_t> target_blocks;
  Tensor theta;  // source_blocks.size() × target_blocks.size()
  std::size_t sample_count = 0;

  bool contains(std::size_t source_block, std::size_t target_block) const;
  /// Θ for global 1-based block indices. Throws InvalidInput if the pair is not in this stage.
  double at(std::size_t source_block, std::size_t target_block) const;
};

/// Σ[j-1] = Θ(P^g_j, P^g_{j+1}) for j = 1..depth-1.
struct IntraCapacityVector {
  std::string anchor_id;
  std::vector<double> sigma;

  /// Σ for 1-based block j; j = depth has no successor and returns mean().
  double at(std::size_t block) const;
  double mean() const;
};

/// Probe distributions of all blocks on a dataset, one anchor pass.
struct ProbeOutputs {
  std::string anchor_id;
  std::vector<Tensor> per_block;  // per_block[k] for block k+1
};

ProbeOutputs compute_probe_outputs(const ProbeSet& probes, const AnchorModel& anchor, const Dataset& data);

/// Θ grids for every stage both anchors share. The source must have lower FLOPs.
std::vector<SimilarityMatrix> similarity_matrices(const AnchorModel& source, const ProbeSet& source_probes,
                                                  const AnchorModel& target, const ProbeSet& target_probes,
                                                  const Dataset& val, std::size_t threads = 1);

IntraCapacityVector intra_capacity(const AnchorModel& anchor, const ProbeSet& probes, const Dataset& val);

/// Mean KL between the anchors' own head outputs, `small` as p.
double last_block_kl(const AnchorModel& small, const AnchorModel& large, const Dataset& val);

enum class MetricKind { kMse, kCe, kCka, kDm };

std::string to_string(MetricKind kind);

/// Mean squared distance between paired rows. Requires equal widths.
double mse_metric(const Tensor& f, const Tensor& g);
/// −Σ log P[y] over rows of a probability tensor.
double ce_metric(const Tensor& source_probs, std::span<const std::size_t> labels);
/// Residual of the best affine map f → g, fitted with the given ridge.
double dm_metric(const Tensor& f, const Tensor& g, double ridge = 1e-8);
/// Linear CKA on column-centered features. Throws NumericError if either side has no variance.
double cka(const Tensor& f, const Tensor& g);
/// Mean of per-class CKA over classes with >= 2 samples (and non-degenerate features).
double class_conditional_cka(const Tensor& f, const Tensor& g, std::span<const std::size_t> labels);

/// Dispatches to the metrics above. For kCe `f` holds source probe distributions
/// and `g` is ignored. Lower is more similar except for kCka.
double baseline_metric(MetricKind kind, const Tensor& f, const Tensor& g, std::span<const std::size_t> labels = {});

/// Copy of `data` with labels permuted by a seeded shuffle.
Dataset shuffle_labels(const Dataset& data, std::uint64_t seed);

/// CSV grid: header row of target block indices, one row per source block, 17 significant digits.
void export_heatmap(const SimilarityMatrix& matrix, const std::filesystem::path& path);

struct Heatmap {
  std::vector<std::size_t> source_blocks;
  std::vector<std::size_t> target_blocks;
  Tensor values;
};
Heatmap read_heatmap(const std::filesystem::path& path);

void save_similarity(const std::vector<SimilarityMatrix>& matrices, const IntraCapacityVector& sigma,
                     double last_block, const std::filesystem::path& path);
struct SimilarityBundle {
  std::vector<SimilarityMatrix> matrices;
  IntraCapacityVector sigma;
  double last_block_kl = 0.0;
};
SimilarityBundle load_similarity(const std::filesystem::path& path);

}  // namespace stitchlab
