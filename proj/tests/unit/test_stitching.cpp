#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <memory>
#include <string>

#include "doctest.h"
#include "stitchlab/config.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/experiment.hpp"
#include "stitchlab/linalg.hpp"
#include "stitchlab/stitching.hpp"
#include "test_support.hpp"

using namespace stitchlab;

namespace {

StitchPlan plan_of(std::initializer_list<StitchConfig> configs) {
  StitchPlan p;
  for (const auto& c : configs) p.entries.push_back({c, std::nullopt, std::nullopt});
  return p;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  return m;
}

double residual(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& y) {
  return affine_residual(AffineMap{w, b}, x, y);
}

/// Source S and a deeper target L whose first blocks copy S, so an identity
/// stitch at (depth S, depth S) reproduces L exactly.
struct CopiedPair {
  std::shared_ptr<AnchorModel> source;
  std::shared_ptr<AnchorModel> target;
};

CopiedPair copied_pair() {
  auto s = std::make_shared<AnchorModel>(make_mlp_anchor("S", 5, 3, 8, 2, 41));
  auto t = std::make_shared<AnchorModel>(make_mlp_anchor("L", 5, 3, 8, 4, 42));
  for (std::size_t i = 1; i <= 2; ++i) t->mutable_block(i) = s->block(i);
  s->freeze();
  t->freeze();
  return {s, t};
}

}  // namespace

TEST_SUITE("stitching") {
  TEST_CASE("init recovers identity and exact affine maps") {
    Rng rng(1);
    const Tensor src = testing::random_tensor(64, 6, rng);
    StitchConfig c;
    const auto id = init_stitch_layer(c, src, src);
    CHECK(id.initialized);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(id.weight(r, k) - (r == k ? 1.0 : 0.0)) <= 1e-6);
    for (double v : id.bias.values()) CHECK(std::abs(v) <= 1e-6);

    const Tensor m = testing::random_tensor(6, 4, rng);
    const Tensor bias = testing::random_tensor(1, 4, rng);
    const Tensor tgt = affine(src, m, bias);
    const auto fit = init_stitch_layer(c, src, tgt);
    CHECK(residual(src, fit.weight, fit.bias, tgt) < 1e-8);

    CHECK_THROWS_AS(init_stitch_layer(c, src, tgt.slice_rows(0, 10)), InvalidInput);
  }

  TEST_CASE("rank-deficient sources fall back to the ridge solution") {
    Rng rng(2);
    const Tensor base = testing::random_tensor(40, 3, rng);
    Tensor src(40, 6);
    for (std::size_t r = 0; r < 40; ++r)
      for (std::size_t k = 0; k < 3; ++k) src(r, k) = src(r, k + 3) = base(r, k);
    const Tensor tgt = testing::random_tensor(40, 2, rng);
    const auto fit = init_stitch_layer(StitchConfig{}, src, tgt);
    CHECK(fit.weight.all_finite());
    CHECK(fit.bias.all_finite());

    Eigen::MatrixXd x(40, 7);
    x << to_eigen(src), Eigen::VectorXd::Ones(40);
    const Eigen::MatrixXd sol = x.completeOrthogonalDecomposition().solve(to_eigen(tgt));
    const double reference = (x * sol - to_eigen(tgt)).squaredNorm();
    CHECK(std::abs(residual(src, fit.weight, fit.bias, tgt) - reference) <= 1e-6);
  }

  TEST_CASE("least-squares init is locally optimal") {
    Rng rng(3);
    const Tensor src = testing::random_tensor(50, 5, rng);
    const Tensor tgt = testing::random_tensor(50, 4, rng);
    const auto fit = init_stitch_layer(StitchConfig{}, src, tgt);
    const double best = residual(src, fit.weight, fit.bias, tgt);
    for (int k = 0; k < 100; ++k) {
      Tensor dw = testing::random_tensor(5, 4, rng), db = testing::random_tensor(1, 4, rng);
      double norm = 0.0;
      for (double v : dw.values()) norm += v * v;
      for (double v : db.values()) norm += v * v;
      norm = std::sqrt(norm);
      Tensor w = fit.weight, b = fit.bias;
      for (std::size_t t = 0; t < w.size(); ++t) w.values()[t] += 1e-3 * dw.values()[t] / norm;
      for (std::size_t t = 0; t < b.size(); ++t) b.values()[t] += 1e-3 * db.values()[t] / norm;
      CHECK(residual(src, w, b, tgt) >= best);
    }
  }

  TEST_CASE("identity stitch over copied blocks reproduces the target") {
    auto pair = copied_pair();
    const StitchConfig c = make_stitch_config(*pair.source, *pair.target, 2, 2);
    StitchedSupernet net(pair.source, pair.target, plan_of({c}));
    auto& layer = net.mutable_layer(c);
    layer.weight = Tensor::identity(8);
    layer.bias = Tensor(1, 8);
    layer.initialized = true;

    const Dataset d = gen_blobs(3, 20, 5, 1.0, 8);
    const Tensor out = forward_stitched(net, c, d.inputs);
    const Tensor full = pair.target->forward(d.inputs);
    for (std::size_t k = 0; k < out.size(); ++k) CHECK(std::abs(out.values()[k] - full.values()[k]) <= 1e-12);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double s = 0.0;
      for (double v : out.row(r)) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    CHECK(forward_stitched(net, c, d.inputs) == out);

    const auto eval = evaluate_stitched(net, d);
    REQUIRE(eval.size() == 1);
    CHECK(eval[0].accuracy == accuracy(full, d.labels));
    CHECK(eval[0].flops == c.flops);
    CHECK(evaluate_stitched(net, d)[0].accuracy == eval[0].accuracy);

    const StitchConfig other = make_stitch_config(*pair.source, *pair.target, 1, 3);
    CHECK_THROWS_AS(forward_stitched(net, other, d.inputs), InvalidInput);
    CHECK_THROWS_AS(evaluate_stitched(net, d.subset(std::vector<std::size_t>{})), InvalidInput);
  }

  TEST_CASE("supernet construction checks") {
    auto pair = copied_pair();
    auto loose = std::make_shared<AnchorModel>(make_mlp_anchor("S", 5, 3, 8, 2, 41));
    const StitchConfig c = make_stitch_config(*pair.source, *pair.target, 1, 1);
    CHECK_THROWS_AS(StitchedSupernet(loose, pair.target, plan_of({c})), StateError);
    CHECK_THROWS_AS(StitchedSupernet(pair.source, pair.target, StitchPlan{}), InvalidInput);
    StitchConfig stale = c;
    stale.flops += 1;
    CHECK_THROWS_AS(StitchedSupernet(pair.source, pair.target, plan_of({stale})), InvalidInput);
  }

  TEST_CASE("stitch-layer gradients match central differences") {
    auto s = std::make_shared<AnchorModel>(make_mlp_anchor("a", 8, 4, 8, 2, 5));
    auto t = std::make_shared<AnchorModel>(make_mlp_anchor("b", 8, 4, 8, 3, 6));
    s->freeze();
    t->freeze();
    const StitchConfig c = make_stitch_config(*s, *t, 1, 2);
    StitchedSupernet net(s, t, plan_of({c}));
    Rng rng(7);
    const Tensor x = testing::random_tensor(8, 8, rng);
    const auto labels = testing::random_labels(8, 4, rng);
    StitchLayer layer = net.layer(c);
    layer.weight = testing::random_tensor(8, 8, rng, 0.5);
    layer.bias = testing::random_tensor(1, 8, rng, 0.5);
    const auto g = stitch_loss_and_grad(net, layer, x, labels);
    const double h = 1e-6;
    for (std::size_t k = 0; k < layer.weight.size(); ++k) {
      StitchLayer p = layer, m = layer;
      p.weight.values()[k] += h;
      m.weight.values()[k] -= h;
      const double fd = (stitch_loss_and_grad(net, p, x, labels).loss - stitch_loss_and_grad(net, m, x, labels).loss) / (2 * h);
      CHECK(std::abs(fd - g.grad_weight.values()[k]) <= 1e-4 * std::max(std::abs(fd), 1e-4));
    }
    for (std::size_t k = 0; k < layer.bias.size(); ++k) {
      StitchLayer p = layer, m = layer;
      p.bias.values()[k] += h;
      m.bias.values()[k] -= h;
      const double fd = (stitch_loss_and_grad(net, p, x, labels).loss - stitch_loss_and_grad(net, m, x, labels).loss) / (2 * h);
      CHECK(std::abs(fd - g.grad_bias.values()[k]) <= 1e-4 * std::max(std::abs(fd), 1e-4));
    }
  }

  TEST_CASE("finetuning contract") {
    const auto w = testing::make_tiny_world();
    auto s = std::make_shared<AnchorModel>(w.small);
    auto t = std::make_shared<AnchorModel>(w.large);
    const auto configs = enumerate_configs(*s, *t);
    StitchPlan plan;
    for (const auto& c : configs) plan.entries.push_back({c, std::nullopt, std::nullopt});
    StitchedSupernet net(s, t, plan);
    CHECK_THROWS_AS(finetune_supernet(net, w.splits.train, FinetuneOptions{}), StateError);

    net.initialize(w.splits.val.inputs);
    CHECK(net.initialized());
    const auto initial = net.layers();

    FinetuneOptions zero;
    zero.epochs = 0;
    finetune_supernet(net, w.splits.train, zero);
    for (std::size_t k = 0; k < net.size(); ++k) CHECK(net.layers()[k].weight == initial[k].weight);

    FinetuneOptions opts;
    opts.epochs = 1;
    opts.batch_size = 48;  // fewer batches than configs, so some layers are never sampled
    opts.seed = 9;
    const auto before_src = s->weight_digest(), before_tgt = t->weight_digest();
    const auto result = finetune_supernet(net, w.splits.train, opts);
    CHECK(s->weight_digest() == before_src);
    CHECK(t->weight_digest() == before_tgt);
    std::size_t untouched = 0;
    for (std::size_t k = 0; k < net.size(); ++k) {
      const bool trained = !result.traces[k].losses.empty();
      const bool changed = !(net.layers()[k].weight == initial[k].weight) || !(net.layers()[k].bias == initial[k].bias);
      CHECK(trained == changed);
      untouched += !trained;
    }
    CHECK(untouched > 0);

    StitchedSupernet again(s, t, plan);
    again.initialize(w.splits.val.inputs);
    finetune_supernet(again, w.splits.train, opts);
    for (std::size_t k = 0; k < net.size(); ++k) CHECK(again.layers()[k].weight == net.layers()[k].weight);

    StitchedSupernet each(s, t, plan);
    each.initialize(w.splits.val.inputs);
    const auto each_result = finetune_each_config(each, w.splits.train, opts, 1);
    StitchedSupernet each_mt(s, t, plan);
    each_mt.initialize(w.splits.val.inputs);
    finetune_each_config(each_mt, w.splits.train, opts, 3);
    for (std::size_t k = 0; k < each.size(); ++k) {
      CHECK(each_result.traces[k].losses.size() == (w.splits.train.size() + 47) / 48);
      CHECK(each.layers()[k].weight == each_mt.layers()[k].weight);
    }
    CHECK(evaluate_stitched(each, w.splits.test, 1).size() == evaluate_stitched(each_mt, w.splits.test, 3).size());
  }

  TEST_CASE("single-config loss decreases over the first epoch on the default task") {
    const ExperimentConfig config = default_config();
    const Splits splits = make_splits(config.dataset, 1);
    auto ti = std::make_shared<AnchorModel>(build_anchor(config, config.anchors.front(), splits.train, 1));
    auto b = std::make_shared<AnchorModel>(build_anchor(config, config.anchors.back(), splits.train, 1));
    const StitchConfig c = make_stitch_config(*ti, *b, 2, 4);
    StitchedSupernet net(ti, b, plan_of({c}));
    net.initialize(init_batch(splits.val, config.init_samples));
    FinetuneOptions opts = finetune_options(config, 1);
    opts.epochs = 1;
    const auto result = finetune_supernet(net, splits.train, opts);
    const auto& losses = result.traces[0].losses;
    CHECK(losses.size() == (splits.train.size() + opts.batch_size - 1) / opts.batch_size);
    const std::size_t q = losses.size() / 4;
    double head = 0.0, tail = 0.0;
    for (std::size_t k = 0; k < q; ++k) {
      head += losses[k];
      tail += losses[losses.size() - 1 - k];
    }
    MESSAGE("first-quarter mean loss " << head / q << ", last-quarter " << tail / q);
    CHECK(tail < head);
  }

  TEST_CASE("layer persistence and evaluation CSV") {
    const auto dir = testing::scratch_dir("stitch-io");
    auto pair = copied_pair();
    const StitchConfig c = make_stitch_config(*pair.source, *pair.target, 1, 3);
    StitchedSupernet net(pair.source, pair.target, plan_of({c}));
    const Dataset d = gen_blobs(3, 20, 5, 1.0, 8);
    net.initialize(d.inputs);
    save_stitch_layers(net, dir / "l.json", "dig");
    StitchedSupernet back(pair.source, pair.target, plan_of({c}));
    std::string digest;
    load_stitch_layers(back, dir / "l.json", &digest);
    CHECK(digest == "dig");
    CHECK(back.layer(c).weight == net.layer(c).weight);
    CHECK(back.initialized());

    const auto eval = evaluate_stitched(net, d);
    write_evaluation_csv(eval, dir / "e.csv");
    std::ifstream in(dir / "e.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "config,i,j,flops,accuracy");
  }
}
