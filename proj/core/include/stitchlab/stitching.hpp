#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/selection.hpp"
#include "stitchlab/tensor.hpp"

namespace stitchlab {

/// Affine map T: A^f_i → A^g_j for one stitch configuration.
struct StitchLayer {
  StitchConfig config;
  Tensor weight;  // width(A^f_i) × width(A^g_j)
  Tensor bias;    // 1 × width(A^g_j)
  bool initialized = false;
};

/// Ridge least-squares fit of [src, 1]·[W; b] ≈ tgt (ridge 1e-8).
StitchLayer init_stitch_layer(const StitchConfig& config, const Tensor& source_activations,
                              const Tensor& target_activations, double ridge = 1e-8);

/// Two frozen anchors plus one stitch layer per plan config.
class StitchedSupernet {
 public:
  StitchedSupernet(std::shared_ptr<const AnchorModel> source, std::shared_ptr<const AnchorModel> target,
                   const StitchPlan& plan);

  const AnchorModel& source() const { return *source_; }
  const AnchorModel& target() const { return *target_; }
  std::size_t size() const { return layers_.size(); }
  const std::vector<StitchLayer>& layers() const { return layers_; }
  const StitchLayer& layer(const StitchConfig& config) const;
  StitchLayer& mutable_layer(const StitchConfig& config);
  std::size_t index_of(const StitchConfig& config) const;

  /// Least-squares init of every layer from one batch pushed through both anchors.
  void initialize(const Tensor& batch, double ridge = 1e-8);
  bool initialized() const;

  /// Anchor digests recorded at construction.
  std::uint64_t source_digest() const { return source_digest_; }
  std::uint64_t target_digest() const { return target_digest_; }
  /// Throws StateError if either anchor's weights changed since construction.
  void check_frozen() const;

 private:
  std::shared_ptr<const AnchorModel> source_;
  std::shared_ptr<const AnchorModel> target_;
  std::vector<StitchLayer> layers_;
  std::uint64_t source_digest_ = 0;
  std::uint64_t target_digest_ = 0;
};

/// g_{>j}(T(f_{≤i}(batch))) as class probabilities.
Tensor forward_stitched(const StitchedSupernet& net, const StitchConfig& config, const Tensor& batch);

/// Mean cross-entropy of one stitched model and its gradient with respect to the stitch layer.
struct StitchLoss {
  double loss = 0.0;
  Tensor grad_weight;
  Tensor grad_bias;
};
StitchLoss stitch_loss_and_grad(const StitchedSupernet& net, const StitchLayer& layer, const Tensor& batch,
                                std::span<const std::size_t> labels);

struct FinetuneOptions {
  std::size_t epochs = 20;
  double lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct ConfigTrace {
  std::vector<std::size_t> epochs;  // epoch (1-based) of every step taken on this config
  std::vector<double> losses;       // minibatch loss before the step
};

struct FinetuneResult {
  std::vector<ConfigTrace> traces;  // aligned with layers()
};

/// One uniformly sampled config per minibatch; only that config's layer is updated.
FinetuneResult finetune_supernet(StitchedSupernet& net, const Dataset& train, const FinetuneOptions& options);

/// Trains every layer for the full budget as if it were the only config in the
/// plan. Layer k uses seed derive_seed(options.seed, k).
FinetuneResult finetune_each_config(StitchedSupernet& net, const Dataset& train, const FinetuneOptions& options,
                                    std::size_t threads = 1);

struct StitchEvaluation {
  StitchConfig config;
  std::uint64_t flops = 0;
  double accuracy = 0.0;
};

/// Top-1 accuracy of every stitched model on the full split.
std::vector<StitchEvaluation> evaluate_stitched(const StitchedSupernet& net, const Dataset& test, std::size_t threads = 1);

/// CSV with header "config,i,j,flops,accuracy".
void write_evaluation_csv(std::span<const StitchEvaluation> results, const std::filesystem::path& path);

void save_stitch_layers(const StitchedSupernet& net, const std::filesystem::path& path, const std::string& inputs_digest);
/// Restores layers into a supernet built from the same plan.
void load_stitch_layers(StitchedSupernet& net, const std::filesystem::path& path, std::string* inputs_digest = nullptr);

}  // namespace stitchlab
