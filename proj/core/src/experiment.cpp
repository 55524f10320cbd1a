#include "stitchlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

AnchorModel build_anchor(const ExperimentConfig& config, const AnchorSpec& spec, const Dataset& train,
                         std::uint64_t run_seed, TrainResult* trace) {
  AnchorModel anchor = AnchorModel::create(spec.id, train.input_dim(), train.num_classes, spec.stages,
                                           run_seed_for(spec.seed, run_seed));
  const auto& b = config.anchor_training;
  TrainOptions opts{b.epochs, b.lr, b.batch_size, run_seed_for(derive_seed(b.seed, spec.seed), run_seed)};
  TrainResult result = train_anchor(anchor, train, opts);
  anchor.set_dataset_digest(digest(train));
  anchor.freeze();
  if (trace) *trace = std::move(result);
  return anchor;
}

ProbeSet build_probeset(const ExperimentConfig& config, const AnchorModel& anchor, const Dataset& train,
                        const Dataset* val, std::uint64_t run_seed, bool record_trace) {
  const auto& b = config.probe_training;
  Fnv1a h;
  h.add_string(anchor.id());
  ProbeTrainOptions opts;
  opts.epochs = b.epochs;
  opts.lr = b.lr;
  opts.batch_size = b.batch_size;
  opts.seed = run_seed_for(derive_seed(b.seed, h.value()), run_seed);
  opts.record_trace = record_trace;
  return train_probeset(anchor, train, opts, val);
}

std::vector<const AnchorModel*> order_by_flops(std::span<const AnchorModel* const> anchors) {
  std::vector<const AnchorModel*> out(anchors.begin(), anchors.end());
  std::sort(out.begin(), out.end(), [](const AnchorModel* a, const AnchorModel* b) {
    const auto fa = flops(*a), fb = flops(*b);
    return fa != fb ? fa < fb : a->id() < b->id();
  });
  return out;
}

FinetuneOptions finetune_options(const ExperimentConfig& config, std::uint64_t run_seed) {
  const auto& b = config.stitch_training;
  return {b.epochs, b.lr, b.batch_size, run_seed_for(b.seed, run_seed)};
}

Tensor init_batch(const Dataset& data, std::size_t count) {
  return data.inputs.slice_rows(0, std::min(count, data.size()));
}

std::vector<StitchEvaluation> exhaustive_oracle(const ExperimentConfig& config,
                                                std::shared_ptr<const AnchorModel> source,
                                                std::shared_ptr<const AnchorModel> target, const Splits& splits,
                                                std::uint64_t run_seed, std::size_t threads) {
  StitchPlan plan;
  plan.method = PlanMethod::kExhaustive;
  for (auto& c : enumerate_configs(*source, *target)) plan.entries.push_back({c, std::nullopt, std::nullopt});
  canonicalize(plan);
  StitchedSupernet net(std::move(source), std::move(target), plan);
  net.initialize(init_batch(splits.val, config.init_samples));
  finetune_each_config(net, splits.train, finetune_options(config, run_seed), threads);
  return evaluate_stitched(net, splits.test, threads);
}

std::vector<ParetoPoint> plan_points(std::span<const StitchConfig> plan, std::span<const StitchEvaluation> evaluations) {
  std::map<std::string, const StitchEvaluation*> by_key;
  for (const auto& e : evaluations) by_key[e.config.key()] = &e;
  std::vector<ParetoPoint> points;
  for (const auto& c : plan) {
    const auto it = by_key.find(c.key());
    if (it == by_key.end()) throw MissingArtifact("no evaluation for stitch " + c.key());
    points.push_back({c.key(), static_cast<double>(it->second->flops), it->second->accuracy});
  }
  return points;
}

std::vector<StitchConfig> subsample_by_flops(std::vector<StitchConfig> plan, std::size_t k) {
  std::sort(plan.begin(), plan.end(), config_less);
  if (k >= plan.size()) return plan;
  if (k == 0) return {};
  if (k == 1) return {plan[(plan.size() - 1) / 2]};
  std::vector<StitchConfig> out;
  const double step = static_cast<double>(plan.size() - 1) / static_cast<double>(k - 1);
  for (std::size_t t = 0; t < k; ++t) out.push_back(plan[static_cast<std::size_t>(std::llround(step * t))]);
  return out;
}

}  // namespace stitchlab
