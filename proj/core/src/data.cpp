#include "stitchlab/data.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kFull: return "full";
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
  }
  return "unknown";
}

void Dataset::validate() const {
  if (inputs.rows() != labels.size()) throw InvalidInput("Dataset: input rows do not match label count");
  if (num_classes < 1) throw InvalidInput("Dataset: num_classes must be >= 1");
  for (auto y : labels) {
    if (y >= num_classes) throw InvalidInput("Dataset: label out of range");
  }
  require_finite(inputs, "Dataset inputs");
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.inputs = inputs.gather_rows(rows);
  out.num_classes = num_classes;
  out.split = split;
  out.labels.reserve(rows.size());
  out.source_indices.reserve(rows.size());
  for (auto r : rows) {
    out.labels.push_back(labels[r]);
    out.source_indices.push_back(source_indices.empty() ? r : source_indices[r]);
  }
  return out;
}

Dataset gen_blobs(std::size_t num_classes, std::size_t per_class, std::size_t input_dim, double spread,
                  std::uint64_t seed) {
  if (num_classes < 2) throw InvalidInput("gen_blobs: num_classes must be >= 2");
  if (per_class < 1) throw InvalidInput("gen_blobs: per_class must be >= 1");
  if (input_dim < 1) throw InvalidInput("gen_blobs: input_dim must be >= 1");
  if (!(spread >= 0.0) || !std::isfinite(spread)) throw InvalidInput("gen_blobs: spread must be >= 0");

  Rng rng(seed);
  Tensor means(num_classes, input_dim);
  for (double& v : means.values()) v = rng.normal();

  Dataset data;
  data.num_classes = num_classes;
  data.inputs = Tensor(num_classes * per_class, input_dim);
  data.labels.resize(num_classes * per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::size_t r = c * per_class + k;
      data.labels[r] = c;
      for (std::size_t d = 0; d < input_dim; ++d) {
        // Always draw so that the stream does not depend on spread.
        const double z = rng.normal();
        data.inputs(r, d) = means(c, d) + spread * z;
      }
    }
  }
  data.source_indices.resize(data.labels.size());
  std::iota(data.source_indices.begin(), data.source_indices.end(), 0);
  return data;
}

Dataset gen_spirals(std::size_t num_classes, std::size_t per_class, double noise, std::uint64_t seed) {
  if (num_classes < 2) throw InvalidInput("gen_spirals: num_classes must be >= 2");
  if (per_class < 1) throw InvalidInput("gen_spirals: per_class must be >= 1");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw InvalidInput("gen_spirals: noise must be >= 0");

  Rng rng(seed);
  Dataset data;
  data.num_classes = num_classes;
  data.inputs = Tensor(num_classes * per_class, 2);
  data.labels.resize(num_classes * per_class);
  const double turns = 1.75;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::size_t r = c * per_class + k;
      // Radius grows linearly along the arm; start slightly off the origin so arms stay distinct.
      const double t = per_class == 1 ? 1.0 : static_cast<double>(k) / static_cast<double>(per_class - 1);
      const double radius = 0.1 + 0.9 * t;
      const double angle = phase + turns * 2.0 * std::numbers::pi * t;
      const double nx = rng.normal();
      const double ny = rng.normal();
      data.inputs(r, 0) = radius * std::cos(angle) + noise * nx;
      data.inputs(r, 1) = radius * std::sin(angle) + noise * ny;
      data.labels[r] = c;
    }
  }
  data.source_indices.resize(data.labels.size());
  std::iota(data.source_indices.begin(), data.source_indices.end(), 0);
  return data;
}

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& field) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated file: missing " + field);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                                  static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes.data(), 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto image_bytes = read_file(images);
  const auto label_bytes = read_file(labels);

  if (read_be32(image_bytes, 0, "images magic") != kImagesMagic) throw FormatError("images: bad magic");
  if (read_be32(label_bytes, 0, "labels magic") != kLabelsMagic) throw FormatError("labels: bad magic");

  const std::size_t count = read_be32(image_bytes, 4, "images count");
  const std::size_t rows = read_be32(image_bytes, 8, "images rows");
  const std::size_t cols = read_be32(image_bytes, 12, "images cols");
  const std::size_t label_count = read_be32(label_bytes, 4, "labels count");
  if (count != label_count) {
    throw FormatError("count mismatch: images count " + std::to_string(count) + " vs labels count " +
                      std::to_string(label_count));
  }
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() < 16 + count * pixels) throw FormatError("truncated file: images pixel data");
  if (label_bytes.size() < 8 + count) throw FormatError("truncated file: labels data");

  Dataset data;
  data.inputs = Tensor(count, pixels);
  data.labels.resize(count);
  std::size_t max_label = 0;
  for (std::size_t n = 0; n < count; ++n) {
    for (std::size_t p = 0; p < pixels; ++p) {
      data.inputs(n, p) = static_cast<double>(image_bytes[16 + n * pixels + p]) / 255.0;
    }
    data.labels[n] = label_bytes[8 + n];
    max_label = std::max(max_label, data.labels[n]);
  }
  data.num_classes = count == 0 ? 0 : max_label + 1;
  data.source_indices.resize(count);
  std::iota(data.source_indices.begin(), data.source_indices.end(), 0);
  return data;
}

void write_idx(const Dataset& data, std::size_t rows, std::size_t cols, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  if (rows * cols != data.input_dim()) throw InvalidInput("write_idx: rows*cols must equal input width");
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img) throw IoError("cannot write " + images.string());
  if (!lab) throw IoError("cannot write " + labels.string());
  write_be32(img, kImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(data.size()));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : data.inputs.values()) {
    if (v < 0.0 || v > 1.0) throw InvalidInput("write_idx: pixel values must lie in [0, 1]");
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  write_be32(lab, kLabelsMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (auto y : data.labels) {
    if (y > 255) throw InvalidInput("write_idx: label does not fit in a byte");
    lab.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
  if (!img || !lab) throw IoError("write_idx: write failed");
}

Splits split(const Dataset& data, double train_fraction, double val_fraction, double test_fraction,
             std::uint64_t seed) {
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f > 0.0)) throw InvalidInput("split: fractions must be positive");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw InvalidInput("split: fractions must sum to 1");
  }
  const std::size_t n = data.size();
  // The small tolerance keeps e.g. 10*0.8 from flooring to 7.
  const auto part = [n](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)); };
  const std::size_t n_train = part(train_fraction);
  const std::size_t n_val = part(val_fraction);
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw InvalidInput("split: degenerate split (a part would be empty)");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  const std::span<const std::size_t> all(order);
  Splits out;
  out.train = data.subset(all.subspan(0, n_train));
  out.val = data.subset(all.subspan(n_train, n_val));
  out.test = data.subset(all.subspan(n_train + n_val));
  out.train.split = SplitTag::kTrain;
  out.val.split = SplitTag::kVal;
  out.test.split = SplitTag::kTest;
  return out;
}

std::uint64_t digest(const Dataset& data) {
  Fnv1a h;
  h.add(data.inputs);
  h.add_u64(data.num_classes);
  for (auto y : data.labels) h.add_u64(y);
  return h.value();
}

}  // namespace stitchlab
