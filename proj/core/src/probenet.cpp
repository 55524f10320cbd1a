#include "stitchlab/probenet.hpp"

#include <fstream>
#include <iomanip>
#include <numeric>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

Tensor Probe::distributions(const Tensor& activations) const {
  if (activations.cols() != weight.rows()) {
    throw InvalidInput("probe on block " + std::to_string(block) + ": activation width mismatch");
  }
  return softmax_rows(affine(activations, weight, bias));
}

const Probe& ProbeSet::probe(std::size_t block) const {
  if (block < 1 || block > probes.size()) {
    throw InvalidInput("probe set '" + anchor_id + "': block index " + std::to_string(block) + " out of range");
  }
  return probes[block - 1];
}

namespace {

Probe zero_probe(const AnchorModel& anchor, std::size_t block) {
  return Probe{anchor.id(), block, Tensor(anchor.width_at(block), anchor.num_classes()), Tensor(1, anchor.num_classes())};
}

void probe_step(Probe& probe, const Tensor& activations, std::span<const std::size_t> labels, double lr) {
  const Tensor probs = probe.distributions(activations);
  const Tensor grad_logits = softmax_cross_entropy_grad(probs, labels);
  const auto grads = affine_backward(activations, probe.weight, grad_logits);
  Tensor* params[] = {&probe.weight, &probe.bias};
  const Tensor* param_grads[] = {&grads.weight, &grads.bias};
  sgd_step(params, param_grads, lr);
}

void check_inputs(const AnchorModel& anchor, const Dataset& train, const ProbeTrainOptions& options) {
  if (!anchor.frozen()) throw StateError("train_probeset: anchor '" + anchor.id() + "' must be frozen");
  if (options.batch_size < 1) throw InvalidInput("train_probeset: batch_size must be >= 1");
  if (train.size() == 0) throw InvalidInput("train_probeset: empty training set");
  train.validate();
  if (train.num_classes != anchor.num_classes()) throw InvalidInput("train_probeset: class count mismatch");
}

// Visits the minibatches of every epoch in the order train_probeset uses.
template <typename Fn>
void for_each_batch(const Dataset& train, const ProbeTrainOptions& options, std::size_t epoch_count, Rng& rng,
                    std::vector<std::size_t>& order, Fn&& fn) {
  for (std::size_t epoch = 0; epoch < epoch_count; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      std::vector<std::size_t> y(count);
      for (std::size_t r = 0; r < count; ++r) y[r] = train.labels[rows[r]];
      fn(train.inputs.gather_rows(rows), y);
    }
  }
}

}  // namespace

ProbeSet train_probeset(const AnchorModel& anchor, const Dataset& train, const ProbeTrainOptions& options,
                        const Dataset* val) {
  check_inputs(anchor, train, options);
  if (val) val->validate();

  ProbeSet set;
  set.anchor_id = anchor.id();
  set.anchor_digest = anchor.weight_digest();
  set.options = options;
  for (std::size_t b = 1; b <= anchor.depth(); ++b) set.probes.push_back(zero_probe(anchor, b));

  // Cached full-split features for the per-epoch trace only; training never reads them.
  std::vector<Tensor> train_features;
  std::vector<Tensor> val_features;
  if (options.record_trace) {
    train_features = anchor.extract_block_features(train.inputs);
    if (val) val_features = anchor.extract_block_features(val->inputs);
    set.epoch_losses.assign(set.probes.size(), {});
  }
  const auto record = [&](std::size_t epoch) {
    if (!options.record_trace) return;
    for (std::size_t k = 0; k < set.probes.size(); ++k) {
      const Tensor probs = set.probes[k].distributions(train_features[k]);
      set.accuracy_trace.push_back({k + 1, epoch, SplitTag::kTrain, accuracy(probs, train.labels)});
      set.epoch_losses[k].push_back(mean_cross_entropy(probs, train.labels));
      if (val) {
        set.accuracy_trace.push_back(
            {k + 1, epoch, SplitTag::kVal, accuracy(set.probes[k].distributions(val_features[k]), val->labels)});
      }
    }
  };
  record(0);

  Rng rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    for_each_batch(train, options, 1, rng, order, [&](const Tensor& x, std::span<const std::size_t> y) {
      const auto features = anchor.extract_block_features(x);
      ++set.training_forward_passes;
      for (std::size_t k = 0; k < set.probes.size(); ++k) probe_step(set.probes[k], features[k], y, options.lr);
    });
    record(epoch);
  }

  if (anchor.weight_digest() != set.anchor_digest) throw StateError("train_probeset: anchor weights changed");
  return set;
}

Probe train_single_probe(const AnchorModel& anchor, std::size_t block, const Dataset& train,
                         const ProbeTrainOptions& options) {
  check_inputs(anchor, train, options);
  Probe probe = zero_probe(anchor, block);
  Rng rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for_each_batch(train, options, options.epochs, rng, order, [&](const Tensor& x, std::span<const std::size_t> y) {
    probe_step(probe, anchor.forward_prefix(block, x), y, options.lr);
  });
  return probe;
}

Tensor probe_distributions(const ProbeSet& probes, const AnchorModel& anchor, std::size_t block, const Tensor& batch) {
  const Probe& probe = probes.probe(block);
  return probe.distributions(anchor.forward_prefix(block, batch));
}

std::vector<Tensor> all_probe_distributions(const ProbeSet& probes, const AnchorModel& anchor, const Tensor& batch) {
  if (probes.size() != anchor.depth()) throw InvalidInput("probe set does not match anchor depth");
  const auto features = anchor.extract_block_features(batch);
  std::vector<Tensor> out;
  out.reserve(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) out.push_back(probes.probes[k].distributions(features[k]));
  return out;
}

const std::vector<AccuracyRecord>& probe_accuracy_trace(const ProbeSet& probes) { return probes.accuracy_trace; }

void export_accuracy_trace_csv(const ProbeSet& probes, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "block,epoch,split,accuracy\n" << std::setprecision(17);
  for (const auto& r : probes.accuracy_trace) {
    out << r.block << ',' << r.epoch << ',' << to_string(r.split) << ',' << r.accuracy << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void save_probeset(const ProbeSet& probes, const std::filesystem::path& path) {
  using detail::json;
  json jprobes = json::array();
  for (const auto& p : probes.probes) {
    jprobes.push_back({{"block", p.block}, {"weight", detail::tensor_to_json(p.weight)}, {"bias", detail::tensor_to_json(p.bias)}});
  }
  json trace = json::array();
  for (const auto& r : probes.accuracy_trace) {
    trace.push_back({{"block", r.block}, {"epoch", r.epoch}, {"split", to_string(r.split)}, {"accuracy", r.accuracy}});
  }
  const json doc{{"format", "stitchlab.probeset"},
                 {"version", 1},
                 {"anchor_id", probes.anchor_id},
                 {"anchor_digest", to_hex(probes.anchor_digest)},
                 {"options",
                  {{"epochs", probes.options.epochs},
                   {"lr", probes.options.lr},
                   {"batch_size", probes.options.batch_size},
                   {"seed", probes.options.seed}}},
                 {"training_forward_passes", probes.training_forward_passes},
                 {"probes", jprobes},
                 {"accuracy_trace", trace},
                 {"epoch_losses", probes.epoch_losses}};
  detail::write_json_file(doc, path);
}

ProbeSet load_probeset(const std::filesystem::path& path) {
  using detail::field;
  const auto doc = detail::read_json_file(path);
  detail::require_format(doc, "stitchlab.probeset", 1, path);
  ProbeSet set;
  try {
    set.anchor_id = field(doc, "anchor_id").get<std::string>();
    set.anchor_digest = std::stoull(field(doc, "anchor_digest").get<std::string>(), nullptr, 16);
    const auto& opt = field(doc, "options");
    set.options.epochs = field(opt, "epochs").get<std::size_t>();
    set.options.lr = field(opt, "lr").get<double>();
    set.options.batch_size = field(opt, "batch_size").get<std::size_t>();
    set.options.seed = field(opt, "seed").get<std::uint64_t>();
    set.training_forward_passes = field(doc, "training_forward_passes").get<std::uint64_t>();
    for (const auto& jp : field(doc, "probes")) {
      Probe p;
      p.anchor_id = set.anchor_id;
      p.block = field(jp, "block").get<std::size_t>();
      p.weight = detail::tensor_from_json(field(jp, "weight"), "probe weight");
      p.bias = detail::tensor_from_json(field(jp, "bias"), "probe bias");
      if (p.block != set.probes.size() + 1) throw FormatError(path.string() + ": probes must be ordered by block");
      set.probes.push_back(std::move(p));
    }
    for (const auto& jr : field(doc, "accuracy_trace")) {
      const auto split = field(jr, "split").get<std::string>();
      set.accuracy_trace.push_back({field(jr, "block").get<std::size_t>(), field(jr, "epoch").get<std::size_t>(),
                                    split == "val" ? SplitTag::kVal : SplitTag::kTrain,
                                    field(jr, "accuracy").get<double>()});
    }
    set.epoch_losses = field(doc, "epoch_losses").get<std::vector<std::vector<double>>>();
  } catch (const detail::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return set;
}

}  // namespace stitchlab
