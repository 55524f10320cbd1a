#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/config.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/evaluation.hpp"
#include "stitchlab/probenet.hpp"
#include "stitchlab/selection.hpp"
#include "stitchlab/stitching.hpp"

namespace stitchlab {

/// Creates, trains on `train`, and freezes the anchor described by `spec`.
AnchorModel build_anchor(const ExperimentConfig& config, const AnchorSpec& spec, const Dataset& train,
                         std::uint64_t run_seed, TrainResult* trace = nullptr);

ProbeSet build_probeset(const ExperimentConfig& config, const AnchorModel& anchor, const Dataset& train,
                        const Dataset* val, std::uint64_t run_seed, bool record_trace);

/// Anchors sorted by FLOPs (ties by id).
std::vector<const AnchorModel*> order_by_flops(std::span<const AnchorModel* const> anchors);

FinetuneOptions finetune_options(const ExperimentConfig& config, std::uint64_t run_seed);

/// The first `count` rows of `data` (all rows when there are fewer); stitch layers
/// are initialised on validation rows.
Tensor init_batch(const Dataset& data, std::size_t count);

/// Every same-stage configuration of the pair, each stitch layer initialised
/// and finetuned on its own with the stitch budget, then scored on `test`.
std::vector<StitchEvaluation> exhaustive_oracle(const ExperimentConfig& config,
                                                std::shared_ptr<const AnchorModel> source,
                                                std::shared_ptr<const AnchorModel> target, const Splits& splits,
                                                std::uint64_t run_seed, std::size_t threads);

/// Plan points with accuracies looked up in `evaluations` (by config key).
std::vector<ParetoPoint> plan_points(std::span<const StitchConfig> plan, std::span<const StitchEvaluation> evaluations);

/// `k` configurations picked at evenly spaced positions of the FLOPs-ordered plan.
std::vector<StitchConfig> subsample_by_flops(std::vector<StitchConfig> plan, std::size_t k);

}  // namespace stitchlab
