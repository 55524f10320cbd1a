#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/probenet.hpp"
#include "stitchlab/similarity.hpp"

namespace stitchlab {

/// Connects source prefix f_{≤i} to target suffix g_{>j}: the stitch layer maps
/// A^f_i into A^g_j. Block indices are 1-based; j = target depth means only
/// the target head runs after the stitch.
struct StitchConfig {
  std::string source_id;
  std::string target_id;
  std::size_t stage = 0;
  std::size_t source_block = 0;
  std::size_t target_block = 0;
  std::uint64_t flops = 0;

  /// "source:i->target:j"
  std::string key() const;
  friend bool operator==(const StitchConfig&, const StitchConfig&) = default;
};

/// Validates direction, stage and index invariants and computes the stitched FLOPs
/// FLOPs(f≤i) + FLOPs(T) + FLOPs(g>j) + FLOPs(g head).
StitchConfig make_stitch_config(const AnchorModel& source, const AnchorModel& target, std::size_t source_block,
                                std::size_t target_block);

/// Every valid (i, j) for the pair, ordered by i then j.
std::vector<StitchConfig> enumerate_configs(const AnchorModel& source, const AnchorModel& target);

struct StitchScore {
  double gamma = 0.0;
  double omega = 0.0;
  double sigma = 0.0;
};

/// Floor on Σ in the Γ denominator.
inline constexpr double kSigmaFloor = 1e-9;

/// Γ = Ω / max(Σ, δ) with Ω = Θ(P^f_i, P^g_j) and Σ = Θ(P^g_j, P^g_{j+1}).
/// For the last target block Σ is the anchor's mean Σ.
StitchScore stitch_score(const SimilarityMatrix& matrix, const IntraCapacityVector& capacity, std::size_t source_block,
                         std::size_t target_block);
StitchScore stitch_score(double omega, double sigma);

struct ScoredConfig {
  StitchConfig config;
  StitchScore score;
};

/// Scores configs against the matrix covering their stage.
std::vector<ScoredConfig> score_configs(std::span<const StitchConfig> configs, std::span<const SimilarityMatrix> matrices,
                                        const IntraCapacityVector& capacity);

/// FLOPs interval [lo, hi); the last bucket is closed on the right.
struct Bucket {
  double lo = 0.0;
  double hi = 0.0;
  bool closed_right = false;
  std::vector<ScoredConfig> members;  // sorted by FLOPs, then i, then j

  bool admits(std::uint64_t flops) const;
};

/// Equal-width buckets over [min FLOPs, max FLOPs]. Empty buckets are kept.
std::vector<Bucket> build_buckets(std::span<const ScoredConfig> configs, std::size_t num_buckets);

enum class TauMode {
  kRelative,  // Γ ≤ (1+τ)·min Γ in the bucket
  kAbsolute,  // Γ ≤ τ
};

enum class PlanMethod { kKlas, kSnnet, kMinKl, kExhaustive };

std::string to_string(PlanMethod m);
PlanMethod plan_method_from_string(const std::string& name);
std::string to_string(TauMode m);

struct PlanEntry {
  StitchConfig config;
  std::optional<StitchScore> score;
  std::optional<std::size_t> bucket;
};

struct BucketBounds {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t size = 0;
};

/// Selected stitch configurations and how they were chosen.
struct StitchPlan {
  PlanMethod method = PlanMethod::kKlas;
  double tau = 0.0;
  TauMode tau_mode = TauMode::kRelative;
  std::vector<BucketBounds> buckets;
  std::vector<PlanEntry> entries;  // canonical order: FLOPs, source, i, target, j
  std::vector<std::string> warnings;

  std::size_t size() const { return entries.size(); }
  std::vector<StitchConfig> configs() const;
  bool contains(const StitchConfig& c) const;
};

/// Puts entries in canonical order and removes duplicates.
void canonicalize(StitchPlan& plan);

/// Throws InvalidInput unless every block in `target_blocks` appears as a target in the plan.
void require_target_coverage(const StitchPlan& plan, std::span<const std::size_t> target_blocks);

/// Per bucket: the argmin-Γ config (ties: lower FLOPs, then lower i) plus every
/// config under the threshold; union over buckets. With `enforce_coverage`, every
/// target block present among the bucketed configs but absent from the selection
/// then gets its min-Γ config added.
StitchPlan select_candidates(std::span<const Bucket> buckets, double tau, TauMode mode = TauMode::kRelative,
                             bool enforce_coverage = true);

/// Strict weak order used for argmin tie-breaking: Γ, FLOPs, i, j, then ids.
bool better_candidate(const ScoredConfig& a, const ScoredConfig& b);
/// Canonical config order: FLOPs, source id, i, target id, j.
bool config_less(const StitchConfig& a, const StitchConfig& b);

struct KlasOptions {
  double tau = 0.05;
  TauMode tau_mode = TauMode::kRelative;
  /// 0 = one bucket per target block.
  std::size_t num_buckets = 0;
  std::size_t threads = 1;
};

struct AnchorPairKl {
  std::string source_id;
  std::string target_id;
  double kl = 0.0;
};

struct KlasResult {
  StitchPlan plan;
  const AnchorModel* source = nullptr;
  const AnchorModel* target = nullptr;
  std::vector<AnchorPairKl> pair_kls;  // every small→large pair considered
  std::vector<SimilarityMatrix> matrices;
  IntraCapacityVector capacity;
  std::vector<ScoredConfig> scored;  // all configs of the chosen pair
};

/// Anchor pair with the lowest directed head KL (smaller anchor as p), ties by order in `pool`.
std::pair<const AnchorModel*, const AnchorModel*> select_anchor_pair(std::span<const AnchorModel* const> pool,
                                                                     const Dataset& val,
                                                                     std::vector<AnchorPairKl>* table = nullptr);

/// Anchor selection, Θ/Σ, Γ scoring, bucketing and candidate selection.
KlasResult klas(std::span<const AnchorModel* const> pool, std::span<const ProbeSet* const> probesets, const Dataset& val,
                const KlasOptions& options);

/// Runs candidate selection on already-scored configs of one anchor pair.
StitchPlan klas_select(std::span<const ScoredConfig> scored, const KlasOptions& options, std::size_t target_depth);

enum class SnnetMode { kPaired, kUnpaired };
std::string to_string(SnnetMode m);

/// Index of the paired target block: round(i·n/m) clamped to [1, n].
std::size_t paired_target_block(std::size_t source_block, std::size_t source_depth, std::size_t target_depth);

/// SN-Net style nearest stitching over adjacent anchors of a FLOPs-ordered chain.
/// Unpaired mode adds j±1 around the paired index.
StitchPlan snnet_baseline(std::span<const AnchorModel* const> chain, SnnetMode mode);

/// The k configs with smallest Ω, ignoring buckets and Σ. k is clamped with a warning.
StitchPlan minkl_baseline(std::span<const ScoredConfig> scored, std::size_t k);

struct CascadePoint {
  double threshold = 0.0;
  double avg_flops = 0.0;
  double accuracy = 0.0;
  double routed_fraction = 0.0;
};

/// Route to `big` iff the small model's max softmax is below the threshold.
std::vector<CascadePoint> cascade_operating_points(const AnchorModel& small, const AnchorModel& big,
                                                   std::span<const double> thresholds, const Dataset& eval);

void save_plan(const StitchPlan& plan, const std::filesystem::path& path, const std::string& inputs_digest);
StitchPlan load_plan(const std::filesystem::path& path, std::string* inputs_digest = nullptr);

}  // namespace stitchlab
