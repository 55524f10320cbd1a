#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stitchlab/data.hpp"
#include "stitchlab/tensor.hpp"

namespace stitchlab {

enum class Activation { kRelu, kIdentity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct BlockSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::kRelu;
};

struct StageSpec {
  std::size_t hidden_dim = 0;
  std::size_t num_blocks = 0;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct Block {
  BlockSpec spec;
  std::size_t stage = 0;
  Tensor weight;  // in_dim × out_dim
  Tensor bias;    // 1 × out_dim
};

/// Copyable forward-pass counter. Copies start from the source's count.
class PassCounter {
 public:
  PassCounter() = default;
  PassCounter(const PassCounter& other) : count_(other.value()) {}
  PassCounter& operator=(const PassCounter& other) {
    count_.store(other.value());
    return *this;
  }
  void bump() const { count_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t value() const { return count_.load(std::memory_order_relaxed); }
  void reset() const { count_.store(0); }

 private:
  mutable std::atomic<std::uint64_t> count_{0};
};

/// Per-block outputs of a suffix run, kept for backpropagation.
struct SuffixTrace {
  std::size_t after = 0;
  std::vector<Tensor> block_outputs;  // outputs of blocks after+1..depth
  Tensor logits;
  Tensor probs;
};

/// Plain MLP f = head ∘ f_m ∘ ... ∘ f_1, blocks grouped into stages.
///
/// Block indices are 1-based in the public interface: block i maps A_{i-1} to
/// A_i and A_0 is the raw input. A frozen anchor refuses training.
class AnchorModel {
 public:
  /// He-normal weights, zero biases, drawn from `seed`.
  static AnchorModel create(std::string id, std::size_t input_dim, std::size_t num_classes,
                            std::vector<StageSpec> stages, std::uint64_t seed,
                            Activation activation = Activation::kRelu);

  const std::string& id() const { return id_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t depth() const { return blocks_.size(); }
  const std::vector<StageSpec>& stages() const { return stages_; }
  std::uint64_t seed() const { return seed_; }

  /// Stage (0-based) of 1-based block i.
  std::size_t stage_of(std::size_t block) const;
  /// Width of A_i; i = 0 is the input width.
  std::size_t width_at(std::size_t i) const;

  const Block& block(std::size_t i) const;
  Block& mutable_block(std::size_t i);
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }
  Tensor& mutable_head_weight() { return head_weight_; }
  Tensor& mutable_head_bias() { return head_bias_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }

  std::uint64_t dataset_digest() const { return dataset_digest_; }
  void set_dataset_digest(std::uint64_t d) { dataset_digest_ = d; }

  /// A_i = f_{≤i}(x). i = 0 returns x unchanged.
  Tensor forward_prefix(std::size_t upto, const Tensor& batch) const;
  /// Runs blocks after+1..depth and the head on A_after; returns class probabilities.
  Tensor forward_suffix(std::size_t after, const Tensor& activations) const;
  /// Full model: class probabilities.
  Tensor forward(const Tensor& batch) const;
  /// All block outputs A_1..A_depth from a single forward pass.
  std::vector<Tensor> extract_block_features(const Tensor& batch) const;

  SuffixTrace forward_suffix_traced(std::size_t after, const Tensor& activations) const;
  /// dL/dA_after given dL/dlogits, through the frozen suffix. Parameters are not touched.
  Tensor backward_suffix_input(const Tensor& activations, const SuffixTrace& trace, const Tensor& grad_logits) const;

  /// Number of forward entry-point calls since construction or reset.
  std::uint64_t forward_passes() const { return passes_.value(); }
  void reset_forward_passes() const { passes_.reset(); }

  /// FNV-1a over every weight and bias.
  std::uint64_t weight_digest() const;

  friend class AnchorSerializer;

 private:
  Tensor apply_block(std::size_t i, const Tensor& input) const;
  void check_block_index(std::size_t i, bool allow_zero) const;

  std::string id_;
  std::size_t input_dim_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<StageSpec> stages_;
  std::vector<Block> blocks_;
  Tensor head_weight_;
  Tensor head_bias_;
  std::uint64_t seed_ = 0;
  std::uint64_t dataset_digest_ = 0;
  bool frozen_ = false;
  PassCounter passes_;
};

/// Builds an anchor with a single stage of `depth` blocks of width `width`.
AnchorModel make_mlp_anchor(std::string id, std::size_t input_dim, std::size_t num_classes, std::size_t width,
                            std::size_t depth, std::uint64_t seed);

struct TrainOptions {
  std::size_t epochs = 50;
  double lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct TrainResult {
  /// Mean train-set cross-entropy before training (index 0) and after each epoch.
  std::vector<double> loss_trace;
};

/// Minibatch SGD on cross-entropy over all blocks and the head.
TrainResult train_anchor(AnchorModel& anchor, const Dataset& train, const TrainOptions& options);

/// Per-sample FLOPs of one affine layer: 2·in·out.
std::uint64_t affine_flops(std::size_t in, std::size_t out);
/// Blocks plus head.
std::uint64_t flops(const AnchorModel& anchor);
/// Blocks 1..i.
std::uint64_t prefix_flops(const AnchorModel& anchor, std::size_t upto);
/// Blocks after+1..depth, head excluded.
std::uint64_t suffix_flops(const AnchorModel& anchor, std::size_t after);
std::uint64_t head_flops(const AnchorModel& anchor);

void save_anchor(const AnchorModel& anchor, const std::filesystem::path& path);
AnchorModel load_anchor(const std::filesystem::path& path);

}  // namespace stitchlab
