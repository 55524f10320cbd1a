#include <benchmark/benchmark.h>

#include "stitchlab/anchors.hpp"
#include "stitchlab/data.hpp"
#include "stitchlab/probenet.hpp"
#include "stitchlab/rng.hpp"
#include "stitchlab/selection.hpp"
#include "stitchlab/similarity.hpp"
#include "stitchlab/stitching.hpp"
#include "stitchlab/tensor.hpp"

using namespace stitchlab;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor(rows, cols, std::move(v));
}

struct Fixture {
  Splits splits;
  AnchorModel small;
  AnchorModel big;

  Fixture()
      : splits(split(gen_blobs(8, 125, 16, 1.2, 3), 0.75, 0.125, 0.125, 3)),
        small(make_mlp_anchor("Ti", 16, 8, 16, 4, 1)),
        big(make_mlp_anchor("B", 16, 8, 64, 8, 2)) {
    train_anchor(small, splits.train, {5, 0.05, 64, 4});
    train_anchor(big, splits.train, {5, 0.05, 64, 5});
    small.freeze();
    big.freeze();
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor(n, n, 1);
  const Tensor b = random_tensor(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

static void BM_SoftmaxRows(benchmark::State& state) {
  const Tensor logits = random_tensor(256, 10, 3);
  for (auto _ : state) benchmark::DoNotOptimize(softmax_rows(logits));
}
BENCHMARK(BM_SoftmaxRows);

static void BM_ProbeSetEpoch(benchmark::State& state) {
  const auto& f = fixture();
  ProbeTrainOptions opts;
  opts.epochs = 1;
  opts.record_trace = false;
  for (auto _ : state) benchmark::DoNotOptimize(train_probeset(f.big, f.splits.train, opts));
}
BENCHMARK(BM_ProbeSetEpoch)->Unit(benchmark::kMillisecond);

static void BM_SimilarityMatrices(benchmark::State& state) {
  const auto& f = fixture();
  ProbeTrainOptions opts;
  opts.epochs = 2;
  opts.record_trace = false;
  const ProbeSet ps = train_probeset(f.small, f.splits.train, opts);
  const ProbeSet pb = train_probeset(f.big, f.splits.train, opts);
  for (auto _ : state) benchmark::DoNotOptimize(similarity_matrices(f.small, ps, f.big, pb, f.splits.val));
}
BENCHMARK(BM_SimilarityMatrices)->Unit(benchmark::kMillisecond);

static void BM_SelectCandidates(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(9);
  std::vector<ScoredConfig> scored;
  for (std::size_t k = 0; k < n; ++k) {
    StitchConfig c{"a", "b", 0, k % 16 + 1, k / 16 + 1, rng.below(100000) + 1};
    scored.push_back({c, stitch_score(rng.uniform(), 0.5 + rng.uniform())});
  }
  for (auto _ : state) {
    const auto buckets = build_buckets(scored, 8);
    benchmark::DoNotOptimize(select_candidates(buckets, 0.05, TauMode::kRelative, false));
  }
}
BENCHMARK(BM_SelectCandidates)->Arg(32)->Arg(200)->Arg(1024);

static void BM_StitchFinetuneEpoch(benchmark::State& state) {
  const auto& f = fixture();
  auto src = std::make_shared<const AnchorModel>(f.small);
  auto tgt = std::make_shared<const AnchorModel>(f.big);
  StitchPlan plan;
  plan.entries.push_back({make_stitch_config(f.small, f.big, 2, 4), std::nullopt, std::nullopt});
  StitchedSupernet net(src, tgt, plan);
  net.initialize(f.splits.train.inputs);
  for (auto _ : state) benchmark::DoNotOptimize(finetune_supernet(net, f.splits.train, {1, 0.05, 64, 7}));
}
BENCHMARK(BM_StitchFinetuneEpoch)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
