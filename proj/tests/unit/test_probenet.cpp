#include <cmath>
#include <fstream>
#include <string>

#include "doctest.h"
#include "stitchlab/config.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/experiment.hpp"
#include "stitchlab/probenet.hpp"
#include "test_support.hpp"

using namespace stitchlab;

namespace {

ProbeTrainOptions quick_options(std::size_t epochs, std::size_t batch, bool trace) {
  ProbeTrainOptions o;
  o.epochs = epochs;
  o.lr = 0.1;
  o.batch_size = batch;
  o.seed = 77;
  o.record_trace = trace;
  return o;
}

double final_accuracy(const ProbeSet& set, std::size_t block, SplitTag split) {
  double acc = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& r : set.accuracy_trace)
    if (r.block == block && r.split == split && r.epoch >= best_epoch) {
      best_epoch = r.epoch;
      acc = r.accuracy;
    }
  return acc;
}

double accuracy_at(const ProbeSet& set, std::size_t block, std::size_t epoch, SplitTag split) {
  for (const auto& r : set.accuracy_trace)
    if (r.block == block && r.epoch == epoch && r.split == split) return r.accuracy;
  return -1.0;
}

}  // namespace

TEST_SUITE("probenet") {
  TEST_CASE("requires a frozen anchor") {
    const Dataset d = gen_blobs(3, 20, 4, 1.0, 1);
    AnchorModel m = make_mlp_anchor("m", 4, 3, 5, 2, 1);
    CHECK_THROWS_AS(train_probeset(m, d, quick_options(1, 8, false)), StateError);
    m.freeze();
    CHECK_NOTHROW(train_probeset(m, d, quick_options(1, 8, false)));
  }

  TEST_CASE("zero epochs leaves uniform probes") {
    const Dataset d = gen_blobs(4, 20, 4, 1.0, 1);
    AnchorModel m = make_mlp_anchor("m", 4, 4, 5, 3, 1);
    m.freeze();
    const ProbeSet set = train_probeset(m, d, quick_options(0, 8, true));
    CHECK(set.size() == 3);
    CHECK(set.training_forward_passes == 0);
    for (std::size_t b = 1; b <= 3; ++b) {
      const Tensor p = probe_distributions(set, m, b, d.inputs);
      for (double v : p.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
      // Untrained: accuracy within 5 points of chance on balanced data.
      CHECK(std::abs(final_accuracy(set, b, SplitTag::kTrain) - 0.25) <= 0.05);
    }
    CHECK_THROWS_AS(set.probe(4), InvalidInput);
    CHECK_THROWS_AS(set.probe(0), InvalidInput);
  }

  TEST_CASE("one anchor pass per minibatch regardless of probe count") {
    const Dataset d = gen_blobs(3, 33, 4, 1.0, 2);  // N = 99
    for (std::size_t depth : {1u, 3u, 7u}) {
      AnchorModel m = make_mlp_anchor("m", 4, 3, 5, depth, 3);
      m.freeze();
      for (std::size_t batch : {10u, 32u, 99u, 128u}) {
        const std::size_t epochs = 3;
        m.reset_forward_passes();
        const ProbeSet set = train_probeset(m, d, quick_options(epochs, batch, false));
        const std::uint64_t expected = (99 + batch - 1) / batch * epochs;
        CHECK(m.forward_passes() == expected);
        CHECK(set.training_forward_passes == expected);
      }
    }
  }

  TEST_CASE("joint training equals training each probe alone") {
    const Dataset d = gen_blobs(3, 40, 5, 1.0, 4);
    AnchorModel m = make_mlp_anchor("m", 5, 3, 6, 3, 4);
    m.freeze();
    const auto opts = quick_options(4, 16, false);
    const ProbeSet joint = train_probeset(m, d, opts);
    for (std::size_t b = 1; b <= 3; ++b) {
      const Probe single = train_single_probe(m, b, d, opts);
      for (std::size_t k = 0; k < single.weight.size(); ++k)
        CHECK(std::abs(single.weight.values()[k] - joint.probe(b).weight.values()[k]) <= 1e-12);
      for (std::size_t k = 0; k < single.bias.size(); ++k)
        CHECK(std::abs(single.bias.values()[k] - joint.probe(b).bias.values()[k]) <= 1e-12);
    }
  }

  TEST_CASE("zero-weight probe is uniform") {
    Probe p;
    p.block = 1;
    p.weight = Tensor(3, 5);
    p.bias = Tensor(1, 5);
    Rng rng(1);
    const Tensor out = p.distributions(testing::random_tensor(4, 3, rng));
    for (double v : out.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  }

  TEST_CASE("probe gradients match central differences") {
    Rng rng(12);
    const Tensor a = testing::random_tensor(8, 8, rng);
    const auto labels = testing::random_labels(8, 8, rng);
    Probe p;
    p.block = 1;
    p.weight = testing::random_tensor(8, 8, rng, 0.3);
    p.bias = testing::random_tensor(1, 8, rng, 0.3);
    const auto grads = affine_backward(a, p.weight, softmax_cross_entropy_grad(p.distributions(a), labels));
    const double h = 1e-5;
    for (std::size_t k = 0; k < p.weight.size(); ++k) {
      Probe plus = p, minus = p;
      plus.weight.values()[k] += h;
      minus.weight.values()[k] -= h;
      const double fd =
          (mean_cross_entropy(plus.distributions(a), labels) - mean_cross_entropy(minus.distributions(a), labels)) / (2 * h);
      CHECK(std::abs(fd - grads.weight.values()[k]) <= 1e-4 * std::max(1e-6, std::abs(fd)) + 1e-10);
    }
  }

  TEST_CASE("trace export and persistence") {
    const auto dir = testing::scratch_dir("probes");
    const Dataset d = gen_blobs(3, 20, 4, 1.0, 1);
    const Splits s = split(d, 0.6, 0.2, 0.2, 1);
    AnchorModel m = make_mlp_anchor("m", 4, 3, 5, 2, 1);
    m.freeze();
    const ProbeSet set = train_probeset(m, s.train, quick_options(2, 8, true), &s.val);
    CHECK(probe_accuracy_trace(set).size() == 2 * 3 * 2);
    export_accuracy_trace_csv(set, dir / "trace.csv");
    std::ifstream in(dir / "trace.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "block,epoch,split,accuracy");

    save_probeset(set, dir / "p.json");
    const ProbeSet back = load_probeset(dir / "p.json");
    CHECK(back.anchor_id == "m");
    CHECK(back.anchor_digest == set.anchor_digest);
    REQUIRE(back.size() == set.size());
    for (std::size_t b = 1; b <= set.size(); ++b) CHECK(back.probe(b).weight == set.probe(b).weight);
  }

  TEST_CASE("default task: deepest probe tracks the head and converges early") {
    const ExperimentConfig config = default_config();
    const Splits s = make_splits(config.dataset, 1);
    const AnchorSpec& spec_b = config.anchors.back();
    REQUIRE(spec_b.id == "B");
    const AnchorModel b = build_anchor(config, spec_b, s.train, 1);
    const ProbeSet set = build_probeset(config, b, s.train, &s.val, 1, true);
    const double head = accuracy(b.forward(s.val.inputs), s.val.labels);
    const double deepest = final_accuracy(set, b.depth(), SplitTag::kVal);
    MESSAGE("head " << head << " deepest probe " << deepest);
    CHECK(std::abs(deepest - head) <= 0.02);

    const double at4 = accuracy_at(set, b.depth(), 4, SplitTag::kVal);
    MESSAGE("deepest probe epoch 4 " << at4 << " final " << deepest);
    CHECK(std::abs(at4 - deepest) <= 0.01);
  }
}
