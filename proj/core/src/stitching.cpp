#include "stitchlab/stitching.hpp"

#include <fstream>
#include <iomanip>
#include <numeric>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/linalg.hpp"
#include "stitchlab/parallel.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

StitchLayer init_stitch_layer(const StitchConfig& config, const Tensor& source_activations,
                              const Tensor& target_activations, double ridge) {
  if (source_activations.rows() != target_activations.rows()) {
    throw InvalidInput("init_stitch_layer: source and target batches have different row counts");
  }
  AffineMap map = fit_affine_least_squares(source_activations, target_activations, ridge);
  return StitchLayer{config, std::move(map.weight), std::move(map.bias), true};
}

StitchedSupernet::StitchedSupernet(std::shared_ptr<const AnchorModel> source, std::shared_ptr<const AnchorModel> target,
                                   const StitchPlan& plan)
    : source_(std::move(source)), target_(std::move(target)) {
  if (!source_ || !target_) throw InvalidInput("StitchedSupernet: null anchor");
  if (!source_->frozen() || !target_->frozen()) throw StateError("StitchedSupernet: anchors must be frozen");
  source_digest_ = source_->weight_digest();
  target_digest_ = target_->weight_digest();
  for (const auto& e : plan.entries) {
    if (e.config.source_id != source_->id() || e.config.target_id != target_->id()) {
      throw InvalidInput("StitchedSupernet: config " + e.config.key() + " does not belong to this anchor pair");
    }
    // Re-derive to validate indices, stage and FLOPs against the actual anchors.
    const StitchConfig checked = make_stitch_config(*source_, *target_, e.config.source_block, e.config.target_block);
    if (checked.flops != e.config.flops) throw InvalidInput("StitchedSupernet: FLOPs of " + e.config.key() + " are stale");
    const std::size_t in = source_->width_at(checked.source_block);
    const std::size_t out = target_->width_at(checked.target_block);
    layers_.push_back({checked, Tensor(in, out), Tensor(1, out), false});
  }
  if (layers_.empty()) throw InvalidInput("StitchedSupernet: empty plan");
}

std::size_t StitchedSupernet::index_of(const StitchConfig& config) const {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& c = layers_[k].config;
    if (c.source_block == config.source_block && c.target_block == config.target_block &&
        c.source_id == config.source_id && c.target_id == config.target_id) {
      return k;
    }
  }
  throw InvalidInput("unknown stitch config " + config.key());
}

const StitchLayer& StitchedSupernet::layer(const StitchConfig& config) const { return layers_[index_of(config)]; }

StitchLayer& StitchedSupernet::mutable_layer(const StitchConfig& config) { return layers_[index_of(config)]; }

void StitchedSupernet::initialize(const Tensor& batch, double ridge) {
  const auto source_features = source_->extract_block_features(batch);
  const auto target_features = target_->extract_block_features(batch);
  for (auto& layer : layers_) {
    layer = init_stitch_layer(layer.config, source_features[layer.config.source_block - 1],
                              target_features[layer.config.target_block - 1], ridge);
  }
  check_frozen();
}

bool StitchedSupernet::initialized() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const StitchLayer& l) { return l.initialized; });
}

void StitchedSupernet::check_frozen() const {
  if (source_->weight_digest() != source_digest_ || target_->weight_digest() != target_digest_) {
    throw StateError("StitchedSupernet: anchor weights changed");
  }
}

Tensor forward_stitched(const StitchedSupernet& net, const StitchConfig& config, const Tensor& batch) {
  const StitchLayer& layer = net.layer(config);
  const Tensor source = net.source().forward_prefix(layer.config.source_block, batch);
  return net.target().forward_suffix(layer.config.target_block, affine(source, layer.weight, layer.bias));
}

StitchLoss stitch_loss_and_grad(const StitchedSupernet& net, const StitchLayer& layer, const Tensor& batch,
                                std::span<const std::size_t> labels) {
  const Tensor source = net.source().forward_prefix(layer.config.source_block, batch);
  const Tensor stitched = affine(source, layer.weight, layer.bias);
  const SuffixTrace trace = net.target().forward_suffix_traced(layer.config.target_block, stitched);
  const Tensor grad_logits = softmax_cross_entropy_grad(trace.probs, labels);
  const Tensor grad_stitched = net.target().backward_suffix_input(stitched, trace, grad_logits);
  auto grads = affine_backward(source, layer.weight, grad_stitched);
  return {mean_cross_entropy(trace.probs, labels), std::move(grads.weight), std::move(grads.bias)};
}

namespace {

void check_finetune(const StitchedSupernet& net, const Dataset& train, const FinetuneOptions& options) {
  if (!net.initialized()) throw StateError("finetune: stitch layers are not initialized");
  if (options.batch_size < 1) throw InvalidInput("finetune: batch_size must be >= 1");
  if (train.size() == 0) throw InvalidInput("finetune: empty training set");
  train.validate();
}

void step_layer(const StitchedSupernet& net, StitchLayer& layer, const Tensor& x, std::span<const std::size_t> y,
                double lr, std::size_t epoch, ConfigTrace& trace) {
  const StitchLoss result = stitch_loss_and_grad(net, layer, x, y);
  Tensor* params[] = {&layer.weight, &layer.bias};
  const Tensor* grads[] = {&result.grad_weight, &result.grad_bias};
  sgd_step(params, grads, lr);
  trace.epochs.push_back(epoch);
  trace.losses.push_back(result.loss);
}

// Minibatch stream shared by both finetuning modes.
template <typename Fn>
void for_each_batch(const Dataset& train, const FinetuneOptions& options, Rng& order_rng, Fn&& fn) {
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      std::vector<std::size_t> y(count);
      for (std::size_t r = 0; r < count; ++r) y[r] = train.labels[rows[r]];
      fn(epoch, train.inputs.gather_rows(rows), y);
    }
  }
}

}  // namespace

FinetuneResult finetune_supernet(StitchedSupernet& net, const Dataset& train, const FinetuneOptions& options) {
  check_finetune(net, train, options);
  FinetuneResult result;
  result.traces.resize(net.size());
  Rng order_rng(options.seed);
  Rng config_rng(derive_seed(options.seed, 1));
  for_each_batch(train, options, order_rng, [&](std::size_t epoch, const Tensor& x, std::span<const std::size_t> y) {
    const std::size_t k = static_cast<std::size_t>(config_rng.below(net.size()));
    StitchLayer& layer = net.mutable_layer(net.layers()[k].config);
    step_layer(net, layer, x, y, options.lr, epoch, result.traces[k]);
  });
  net.check_frozen();
  return result;
}

FinetuneResult finetune_each_config(StitchedSupernet& net, const Dataset& train, const FinetuneOptions& options,
                                    std::size_t threads) {
  check_finetune(net, train, options);
  FinetuneResult result;
  result.traces.resize(net.size());
  std::vector<StitchLayer*> layers;
  for (const auto& l : net.layers()) layers.push_back(&net.mutable_layer(l.config));
  parallel_for(net.size(), threads, [&](std::size_t k) {
    Rng order_rng(derive_seed(options.seed, k));
    for_each_batch(train, options, order_rng, [&](std::size_t epoch, const Tensor& x, std::span<const std::size_t> y) {
      step_layer(net, *layers[k], x, y, options.lr, epoch, result.traces[k]);
    });
  });
  net.check_frozen();
  return result;
}

std::vector<StitchEvaluation> evaluate_stitched(const StitchedSupernet& net, const Dataset& test, std::size_t threads) {
  if (test.size() == 0) throw InvalidInput("evaluate_stitched: empty test set");
  test.validate();
  std::vector<StitchEvaluation> out(net.size());
  parallel_for(net.size(), threads, [&](std::size_t k) {
    const auto& config = net.layers()[k].config;
    out[k] = {config, config.flops, accuracy(forward_stitched(net, config, test.inputs), test.labels)};
  });
  net.check_frozen();
  return out;
}

void write_evaluation_csv(std::span<const StitchEvaluation> results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "config,i,j,flops,accuracy\n" << std::setprecision(17);
  for (const auto& r : results) {
    out << r.config.key() << ',' << r.config.source_block << ',' << r.config.target_block << ',' << r.flops << ','
        << r.accuracy << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void save_stitch_layers(const StitchedSupernet& net, const std::filesystem::path& path, const std::string& inputs_digest) {
  using detail::json;
  json layers = json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"config", l.config.key()},
                      {"i", l.config.source_block},
                      {"j", l.config.target_block},
                      {"initialized", l.initialized},
                      {"weight", detail::tensor_to_json(l.weight)},
                      {"bias", detail::tensor_to_json(l.bias)}});
  }
  const json doc{{"format", "stitchlab.stitches"},
                 {"version", 1},
                 {"source_id", net.source().id()},
                 {"target_id", net.target().id()},
                 {"source_digest", to_hex(net.source_digest())},
                 {"target_digest", to_hex(net.target_digest())},
                 {"layers", layers},
                 {"inputs_digest", inputs_digest}};
  detail::write_json_file(doc, path);
}

void load_stitch_layers(StitchedSupernet& net, const std::filesystem::path& path, std::string* inputs_digest) {
  using detail::field;
  const auto doc = detail::read_json_file(path);
  detail::require_format(doc, "stitchlab.stitches", 1, path);
  try {
    if (field(doc, "source_digest").get<std::string>() != to_hex(net.source_digest()) ||
        field(doc, "target_digest").get<std::string>() != to_hex(net.target_digest())) {
      throw FormatError(path.string() + ": anchor digests do not match the current anchors (stale artifact)");
    }
    for (const auto& jl : field(doc, "layers")) {
      StitchConfig probe;
      probe.source_id = net.source().id();
      probe.target_id = net.target().id();
      probe.source_block = field(jl, "i").get<std::size_t>();
      probe.target_block = field(jl, "j").get<std::size_t>();
      StitchLayer& layer = net.mutable_layer(probe);
      Tensor w = detail::tensor_from_json(field(jl, "weight"), "stitch weight");
      Tensor b = detail::tensor_from_json(field(jl, "bias"), "stitch bias");
      if (!w.same_shape(layer.weight) || !b.same_shape(layer.bias)) throw FormatError(path.string() + ": layer shape mismatch");
      layer.weight = std::move(w);
      layer.bias = std::move(b);
      layer.initialized = field(jl, "initialized").get<bool>();
    }
    if (inputs_digest) *inputs_digest = field(doc, "inputs_digest").get<std::string>();
  } catch (const detail::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace stitchlab
