#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "stitchlab/data.hpp"
#include "stitchlab/errors.hpp"
#include "test_support.hpp"

using namespace stitchlab;

namespace {

/// Full-batch softmax regression on raw inputs; returns accuracy on `eval`.
double linear_classifier_accuracy(const Dataset& train, const Dataset& eval, int steps, double lr) {
  Tensor w(train.input_dim(), train.num_classes);
  Tensor b(1, train.num_classes);
  for (int s = 0; s < steps; ++s) {
    const Tensor probs = softmax_rows(affine(train.inputs, w, b));
    const Tensor g = softmax_cross_entropy_grad(probs, train.labels);
    auto grads = affine_backward(train.inputs, w, g);
    Tensor* params[] = {&w, &b};
    const Tensor* gs[] = {&grads.weight, &grads.bias};
    sgd_step(params, gs, lr);
  }
  return accuracy(softmax_rows(affine(eval.inputs, w, b)), eval.labels);
}

/// Leave-one-out 1-nearest-neighbour accuracy.
double one_nn_accuracy(const Dataset& d) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t label = 0;
    for (std::size_t s = 0; s < d.size(); ++s) {
      if (s == r) continue;
      double dist = 0.0;
      for (std::size_t c = 0; c < d.input_dim(); ++c) dist += std::pow(d.inputs(r, c) - d.inputs(s, c), 2);
      if (dist < best) {
        best = dist;
        label = d.labels[s];
      }
    }
    hits += label == d.labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

void write_raw_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::uint32_t image_magic,
                   std::uint32_t count, std::uint32_t label_count, std::size_t pixel_bytes) {
  std::ofstream img(images, std::ios::binary);
  put_be32(img, image_magic);
  put_be32(img, count);
  put_be32(img, 2);
  put_be32(img, 2);
  for (std::size_t k = 0; k < pixel_bytes; ++k) img.put(static_cast<char>(k % 4 == 0 ? 255 : k % 4 * 10));
  std::ofstream lab(labels, std::ios::binary);
  put_be32(lab, 0x00000801);
  put_be32(lab, label_count);
  for (std::uint32_t k = 0; k < label_count; ++k) lab.put(static_cast<char>(k % 3));
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("zero-spread blobs sit on their class means") {
    const Dataset d = gen_blobs(2, 10, 2, 0.0, 99);
    CHECK(d.size() == 20);
    for (std::size_t r = 1; r < d.size(); ++r) {
      if (d.labels[r] != d.labels[r - 1]) continue;
      CHECK(d.inputs(r, 0) == d.inputs(r - 1, 0));
      CHECK(d.inputs(r, 1) == d.inputs(r - 1, 1));
    }
  }

  TEST_CASE("blob bookkeeping") {
    const Dataset d = gen_blobs(8, 250, 16, 0.5, 7);
    CHECK(d.size() == 2000);
    CHECK(d.input_dim() == 16);
    std::vector<std::size_t> counts(8, 0);
    for (auto y : d.labels) ++counts[y];
    for (auto c : counts) CHECK(c == 250);
    CHECK_THROWS_AS(gen_blobs(1, 10, 2, 0.1, 1), InvalidInput);
    CHECK_THROWS_AS(gen_blobs(2, 0, 2, 0.1, 1), InvalidInput);
    CHECK_THROWS_AS(gen_blobs(2, 10, 0, 0.1, 1), InvalidInput);
  }

  TEST_CASE("well separated blobs are linearly separable") {
    const Dataset d = gen_blobs(4, 100, 2, 0.1, 1);
    CHECK(linear_classifier_accuracy(d, d, 2000, 0.5) > 0.95);
  }

  TEST_CASE("noiseless spirals are perfectly classified by 1-NN") {
    const Dataset d = gen_spirals(2, 100, 0.0, 3);
    CHECK(d.size() == 200);
    CHECK(one_nn_accuracy(d) == 1.0);
  }

  TEST_CASE("spiral bookkeeping") {
    const Dataset d = gen_spirals(3, 50, 0.0, 3);
    CHECK(d.size() == 150);
    std::vector<std::size_t> counts(3, 0);
    for (auto y : d.labels) ++counts[y];
    for (auto c : counts) CHECK(c == 50);
  }

  TEST_CASE("spirals defeat a linear probe") {
    const Dataset d = gen_spirals(2, 200, 0.2, 5);
    const Splits s = split(d, 0.6, 0.2, 0.2, 5);
    CHECK(linear_classifier_accuracy(s.train, s.test, 2000, 0.5) < 0.70);
  }

  TEST_CASE("split sizes and determinism") {
    const Dataset ten = gen_blobs(2, 5, 2, 1.0, 1);
    const Splits s = split(ten, 0.8, 0.1, 0.1, 3);
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 1);
    CHECK(s.train.split == SplitTag::kTrain);

    const Dataset big = gen_blobs(8, 250, 16, 0.5, 7);
    const Splits a = split(big, 0.75, 0.125, 0.125, 7);
    const Splits b = split(big, 0.75, 0.125, 0.125, 7);
    CHECK(a.train.size() == 1500);
    CHECK(a.val.size() == 250);
    CHECK(a.test.size() == 250);
    CHECK(a.train.source_indices == b.train.source_indices);
    CHECK(a.test.source_indices == b.test.source_indices);
    CHECK(digest(a.train) == digest(b.train));

    std::vector<bool> seen(big.size(), false);
    for (const Dataset* part : {&a.train, &a.val, &a.test})
      for (auto r : part->source_indices) {
        CHECK_FALSE(seen[r]);
        seen[r] = true;
      }

    CHECK_THROWS_AS(split(ten, 0.9, 0.05, 0.05, 1), InvalidInput);
    CHECK_THROWS_AS(split(ten, 0.5, 0.2, 0.2, 1), InvalidInput);
  }

  TEST_CASE("IDX reading") {
    const auto dir = testing::scratch_dir("idx");
    write_raw_idx(dir / "img", dir / "lab", 0x00000803, 10, 10, 40);
    const Dataset d = load_idx(dir / "img", dir / "lab");
    CHECK(d.size() == 10);
    CHECK(d.input_dim() == 4);
    CHECK(d.num_classes == 3);
    CHECK(d.inputs(0, 0) == 1.0);
    CHECK(d.inputs(0, 1) == doctest::Approx(10.0 / 255.0));

    write_raw_idx(dir / "img", dir / "lab", 0x00000801, 10, 10, 40);
    CHECK_THROWS_WITH_AS(load_idx(dir / "img", dir / "lab"), doctest::Contains("bad magic"), FormatError);

    write_raw_idx(dir / "img", dir / "lab", 0x00000803, 10, 9, 40);
    CHECK_THROWS_WITH_AS(load_idx(dir / "img", dir / "lab"), doctest::Contains("count"), FormatError);

    write_raw_idx(dir / "img", dir / "lab", 0x00000803, 10, 10, 20);
    CHECK_THROWS_WITH_AS(load_idx(dir / "img", dir / "lab"), doctest::Contains("truncated"), FormatError);
  }

  TEST_CASE("IDX round trip") {
    const auto dir = testing::scratch_dir("idx-rt");
    Dataset d;
    d.inputs = Tensor(3, 4, std::vector<double>{0, 1, 0.2, 0.4, 1, 1, 0, 0, 0.6, 0.8, 1, 0});
    d.labels = {0, 2, 1};
    d.num_classes = 3;
    d.source_indices = {0, 1, 2};
    write_idx(d, 2, 2, dir / "i", dir / "l");
    const Dataset back = load_idx(dir / "i", dir / "l");
    CHECK(back.labels == d.labels);
    for (std::size_t k = 0; k < d.inputs.size(); ++k)
      CHECK(std::abs(back.inputs.values()[k] - d.inputs.values()[k]) <= 0.5 / 255.0 + 1e-12);
  }

  TEST_CASE("dataset validation") {
    Dataset d;
    d.inputs = Tensor(2, 1, 0.0);
    d.labels = {0, 3};
    d.num_classes = 2;
    CHECK_THROWS_AS(d.validate(), InvalidInput);
  }
}
