#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stitchlab/tensor.hpp"

namespace stitchlab {

enum class SplitTag { kFull, kTrain, kVal, kTest };

std::string to_string(SplitTag tag);

/// Labeled examples. `source_indices[r]` is the row index of example r in the
/// dataset this one was split from (identity for freshly generated data).
struct Dataset {
  Tensor inputs;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  SplitTag split = SplitTag::kFull;
  std::vector<std::size_t> source_indices;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return inputs.cols(); }

  /// Checks label range, row count and finiteness. Throws InvalidInput.
  void validate() const;
  Dataset subset(std::span<const std::size_t> rows) const;
};

/// Gaussian clusters. Class means are drawn once from N(0, I) and every point
/// is mean + spread·N(0, I). Labels are balanced and grouped by class.
Dataset gen_blobs(std::size_t num_classes, std::size_t per_class, std::size_t input_dim, double spread,
                  std::uint64_t seed);

/// Interleaved 2-D spiral arms, one per class, with isotropic Gaussian noise.
Dataset gen_spirals(std::size_t num_classes, std::size_t per_class, double noise, std::uint64_t seed);

/// Reads an IDX image/label file pair (MNIST layout). Pixels are scaled to [0, 1].
/// num_classes is max(label)+1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes a dataset as IDX files (inputs must already lie in [0, 1]).
/// `rows`×`cols` must equal the input width.
void write_idx(const Dataset& data, std::size_t rows, std::size_t cols, const std::filesystem::path& images,
               const std::filesystem::path& labels);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Seeded shuffle followed by a contiguous partition. Part sizes are
/// floor(N·train), floor(N·val) and the remainder.
Splits split(const Dataset& data, double train_fraction, double val_fraction, double test_fraction,
             std::uint64_t seed);

/// Content digest of inputs, labels and class count.
std::uint64_t digest(const Dataset& data);

}  // namespace stitchlab
