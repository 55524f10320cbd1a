#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/tensor.hpp"

namespace stitchlab {

/// Linear classifier attached after one block: softmax(A_block·W + b).
struct Probe {
  std::string anchor_id;
  std::size_t block = 0;  // 1-based
  Tensor weight;          // block width × num_classes
  Tensor bias;            // 1 × num_classes

  /// Class probabilities for activations of the attached block.
  Tensor distributions(const Tensor& activations) const;
};

struct ProbeTrainOptions {
  std::size_t epochs = 30;
  double lr = 0.1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Evaluate per-epoch accuracy/loss. Costs one extra anchor pass per evaluated split.
  bool record_trace = true;
};

struct AccuracyRecord {
  std::size_t block = 0;
  std::size_t epoch = 0;  // 0 = before training
  SplitTag split = SplitTag::kTrain;
  double accuracy = 0.0;
};

/// One probe per anchor block, trained jointly against the frozen anchor.
struct ProbeSet {
  std::string anchor_id;
  std::uint64_t anchor_digest = 0;
  std::vector<Probe> probes;  // probes[k] is attached to block k+1
  ProbeTrainOptions options;
  std::vector<AccuracyRecord> accuracy_trace;
  /// epoch_losses[k][e]: train-set CE of probe k after e epochs (e = 0 is the initial state).
  std::vector<std::vector<double>> epoch_losses;
  /// Anchor forward passes spent inside the minibatch loop.
  std::uint64_t training_forward_passes = 0;

  std::size_t size() const { return probes.size(); }
  const Probe& probe(std::size_t block) const;
};

/// Zero-initialized probes on every block. Each minibatch costs exactly one
/// anchor forward pass; every probe then takes one SGD step on its own block's
/// activations. The anchor must be frozen.
ProbeSet train_probeset(const AnchorModel& anchor, const Dataset& train, const ProbeTrainOptions& options,
                        const Dataset* val = nullptr);

/// Trains the probe of a single block alone with the same batch stream as
/// train_probeset. Used to check that joint training only amortizes cost.
Probe train_single_probe(const AnchorModel& anchor, std::size_t block, const Dataset& train,
                         const ProbeTrainOptions& options);

/// softmax(affine(A_block)) for a raw input batch.
Tensor probe_distributions(const ProbeSet& probes, const AnchorModel& anchor, std::size_t block, const Tensor& batch);

/// Distributions of every probe from one anchor pass; result[k] belongs to block k+1.
std::vector<Tensor> all_probe_distributions(const ProbeSet& probes, const AnchorModel& anchor, const Tensor& batch);

const std::vector<AccuracyRecord>& probe_accuracy_trace(const ProbeSet& probes);

/// CSV with header "block,epoch,split,accuracy".
void export_accuracy_trace_csv(const ProbeSet& probes, const std::filesystem::path& path);

void save_probeset(const ProbeSet& probes, const std::filesystem::path& path);
ProbeSet load_probeset(const std::filesystem::path& path);

}  // namespace stitchlab
