#include "stitchlab/anchors.hpp"

#include <cmath>
#include <numeric>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "identity") return Activation::kIdentity;
  throw InvalidInput("unknown activation '" + name + "'");
}

AnchorModel AnchorModel::create(std::string id, std::size_t input_dim, std::size_t num_classes,
                                std::vector<StageSpec> stages, std::uint64_t seed, Activation activation) {
  if (input_dim < 1) throw InvalidInput("AnchorModel: input_dim must be >= 1");
  if (num_classes < 2) throw InvalidInput("AnchorModel: num_classes must be >= 2");
  if (stages.empty()) throw InvalidInput("AnchorModel: at least one stage is required");

  AnchorModel m;
  m.id_ = std::move(id);
  m.input_dim_ = input_dim;
  m.num_classes_ = num_classes;
  m.stages_ = std::move(stages);
  m.seed_ = seed;

  Rng rng(seed);
  std::size_t width = input_dim;
  for (std::size_t s = 0; s < m.stages_.size(); ++s) {
    const auto& stage = m.stages_[s];
    if (stage.hidden_dim < 1 || stage.num_blocks < 1) {
      throw InvalidInput("AnchorModel: stage dims and block counts must be >= 1");
    }
    for (std::size_t b = 0; b < stage.num_blocks; ++b) {
      Block block;
      block.spec = {width, stage.hidden_dim, activation};
      block.stage = s;
      block.weight = Tensor(width, stage.hidden_dim);
      const double scale = std::sqrt(2.0 / static_cast<double>(width));
      for (double& w : block.weight.values()) w = scale * rng.normal();
      block.bias = Tensor(1, stage.hidden_dim);
      m.blocks_.push_back(std::move(block));
      width = stage.hidden_dim;
    }
  }
  m.head_weight_ = Tensor(width, num_classes);
  const double head_scale = std::sqrt(1.0 / static_cast<double>(width));
  for (double& w : m.head_weight_.values()) w = head_scale * rng.normal();
  m.head_bias_ = Tensor(1, num_classes);
  return m;
}

AnchorModel make_mlp_anchor(std::string id, std::size_t input_dim, std::size_t num_classes, std::size_t width,
                            std::size_t depth, std::uint64_t seed) {
  return AnchorModel::create(std::move(id), input_dim, num_classes, {StageSpec{width, depth}}, seed);
}

void AnchorModel::check_block_index(std::size_t i, bool allow_zero) const {
  if ((!allow_zero && i == 0) || i > depth()) {
    throw InvalidInput("anchor '" + id_ + "': block index " + std::to_string(i) + " out of range");
  }
}

std::size_t AnchorModel::stage_of(std::size_t block) const {
  check_block_index(block, false);
  return blocks_[block - 1].stage;
}

std::size_t AnchorModel::width_at(std::size_t i) const {
  check_block_index(i, true);
  return i == 0 ? input_dim_ : blocks_[i - 1].spec.out_dim;
}

const Block& AnchorModel::block(std::size_t i) const {
  check_block_index(i, false);
  return blocks_[i - 1];
}

Block& AnchorModel::mutable_block(std::size_t i) {
  check_block_index(i, false);
  if (frozen_) throw StateError("anchor '" + id_ + "' is frozen");
  return blocks_[i - 1];
}

Tensor AnchorModel::apply_block(std::size_t i, const Tensor& input) const {
  const Block& b = blocks_[i - 1];
  Tensor out = affine(input, b.weight, b.bias);
  if (b.spec.activation == Activation::kRelu) relu_inplace(out);
  return out;
}

Tensor AnchorModel::forward_prefix(std::size_t upto, const Tensor& batch) const {
  check_block_index(upto, true);
  if (batch.cols() != input_dim_) throw InvalidInput("forward_prefix: batch width does not match input_dim");
  passes_.bump();
  Tensor act = batch;
  for (std::size_t i = 1; i <= upto; ++i) act = apply_block(i, act);
  return act;
}

Tensor AnchorModel::forward_suffix(std::size_t after, const Tensor& activations) const {
  check_block_index(after, true);
  if (activations.cols() != width_at(after)) {
    throw InvalidInput("forward_suffix: activation width does not match block " + std::to_string(after));
  }
  passes_.bump();
  Tensor act = activations;
  for (std::size_t i = after + 1; i <= depth(); ++i) act = apply_block(i, act);
  return softmax_rows(affine(act, head_weight_, head_bias_));
}

Tensor AnchorModel::forward(const Tensor& batch) const {
  if (batch.cols() != input_dim_) throw InvalidInput("forward: batch width does not match input_dim");
  passes_.bump();
  Tensor act = batch;
  for (std::size_t i = 1; i <= depth(); ++i) act = apply_block(i, act);
  return softmax_rows(affine(act, head_weight_, head_bias_));
}

std::vector<Tensor> AnchorModel::extract_block_features(const Tensor& batch) const {
  if (batch.cols() != input_dim_) throw InvalidInput("extract_block_features: batch width does not match input_dim");
  passes_.bump();
  std::vector<Tensor> features;
  features.reserve(depth());
  const Tensor* prev = &batch;
  for (std::size_t i = 1; i <= depth(); ++i) {
    features.push_back(apply_block(i, *prev));
    prev = &features.back();
  }
  return features;
}

SuffixTrace AnchorModel::forward_suffix_traced(std::size_t after, const Tensor& activations) const {
  check_block_index(after, true);
  if (activations.cols() != width_at(after)) {
    throw InvalidInput("forward_suffix: activation width does not match block " + std::to_string(after));
  }
  passes_.bump();
  SuffixTrace trace;
  trace.after = after;
  const Tensor* prev = &activations;
  for (std::size_t i = after + 1; i <= depth(); ++i) {
    trace.block_outputs.push_back(apply_block(i, *prev));
    prev = &trace.block_outputs.back();
  }
  trace.logits = affine(*prev, head_weight_, head_bias_);
  trace.probs = softmax_rows(trace.logits);
  return trace;
}

Tensor AnchorModel::backward_suffix_input(const Tensor& activations, const SuffixTrace& trace,
                                          const Tensor& grad_logits) const {
  Tensor grad = matmul_nt(grad_logits, head_weight_);
  for (std::size_t i = depth(); i > trace.after; --i) {
    const std::size_t k = i - trace.after - 1;
    const Block& b = blocks_[i - 1];
    if (b.spec.activation == Activation::kRelu) relu_backward_inplace(grad, trace.block_outputs[k]);
    grad = matmul_nt(grad, b.weight);
  }
  if (!grad.same_shape(activations)) throw InvalidInput("backward_suffix_input: trace does not match activations");
  return grad;
}

std::uint64_t AnchorModel::weight_digest() const {
  Fnv1a h;
  for (const auto& b : blocks_) {
    h.add(b.weight);
    h.add(b.bias);
  }
  h.add(head_weight_);
  h.add(head_bias_);
  return h.value();
}

TrainResult train_anchor(AnchorModel& anchor, const Dataset& train, const TrainOptions& options) {
  if (anchor.frozen()) throw StateError("train_anchor: anchor '" + anchor.id() + "' is frozen");
  if (options.batch_size < 1) throw InvalidInput("train_anchor: batch_size must be >= 1");
  if (train.size() == 0) throw InvalidInput("train_anchor: empty training set");
  train.validate();
  if (train.num_classes != anchor.num_classes()) throw InvalidInput("train_anchor: class count mismatch");

  TrainResult result;
  const auto full_loss = [&] { return mean_cross_entropy(anchor.forward(train.inputs), train.labels); };
  result.loss_trace.push_back(full_loss());

  Rng rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t depth = anchor.depth();

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      const Tensor x = train.inputs.gather_rows(rows);
      std::vector<std::size_t> y(count);
      for (std::size_t r = 0; r < count; ++r) y[r] = train.labels[rows[r]];

      std::vector<Tensor> acts = anchor.extract_block_features(x);
      const Tensor& last = depth == 0 ? x : acts.back();
      const Tensor probs = softmax_rows(affine(last, anchor.head_weight(), anchor.head_bias()));
      const Tensor grad_logits = softmax_cross_entropy_grad(probs, y);

      std::vector<Tensor> grads;
      grads.reserve(2 * depth + 2);
      auto head = affine_backward(last, anchor.head_weight(), grad_logits);
      Tensor grad = std::move(head.input);
      std::vector<AffineGrads> block_grads(depth);
      for (std::size_t i = depth; i >= 1; --i) {
        const Block& b = anchor.block(i);
        if (b.spec.activation == Activation::kRelu) relu_backward_inplace(grad, acts[i - 1]);
        const Tensor& input = i == 1 ? x : acts[i - 2];
        block_grads[i - 1] = affine_backward(input, b.weight, grad);
        grad = std::move(block_grads[i - 1].input);
      }

      std::vector<Tensor*> params;
      std::vector<const Tensor*> param_grads;
      for (std::size_t i = 1; i <= depth; ++i) {
        Block& b = anchor.mutable_block(i);
        params.push_back(&b.weight);
        param_grads.push_back(&block_grads[i - 1].weight);
        params.push_back(&b.bias);
        param_grads.push_back(&block_grads[i - 1].bias);
      }
      params.push_back(&anchor.mutable_head_weight());
      param_grads.push_back(&head.weight);
      params.push_back(&anchor.mutable_head_bias());
      param_grads.push_back(&head.bias);
      sgd_step(params, param_grads, options.lr);
    }
    result.loss_trace.push_back(full_loss());
  }
  return result;
}

std::uint64_t affine_flops(std::size_t in, std::size_t out) { return 2ULL * in * out; }

std::uint64_t prefix_flops(const AnchorModel& anchor, std::size_t upto) {
  if (upto > anchor.depth()) throw InvalidInput("prefix_flops: block index out of range");
  std::uint64_t total = 0;
  for (std::size_t i = 1; i <= upto; ++i) {
    const auto& spec = anchor.block(i).spec;
    total += affine_flops(spec.in_dim, spec.out_dim);
  }
  return total;
}

std::uint64_t suffix_flops(const AnchorModel& anchor, std::size_t after) {
  if (after > anchor.depth()) throw InvalidInput("suffix_flops: block index out of range");
  return prefix_flops(anchor, anchor.depth()) - prefix_flops(anchor, after);
}

std::uint64_t head_flops(const AnchorModel& anchor) {
  return affine_flops(anchor.head_weight().rows(), anchor.head_weight().cols());
}

std::uint64_t flops(const AnchorModel& anchor) { return prefix_flops(anchor, anchor.depth()) + head_flops(anchor); }

class AnchorSerializer {
 public:
  static detail::json to_json(const AnchorModel& m) {
    using detail::json;
    json stages = json::array();
    for (const auto& s : m.stages_) stages.push_back({{"hidden_dim", s.hidden_dim}, {"num_blocks", s.num_blocks}});
    json blocks = json::array();
    for (const auto& b : m.blocks_) {
      blocks.push_back({{"in_dim", b.spec.in_dim},
                        {"out_dim", b.spec.out_dim},
                        {"activation", to_string(b.spec.activation)},
                        {"stage", b.stage},
                        {"weight", detail::tensor_to_json(b.weight)},
                        {"bias", detail::tensor_to_json(b.bias)}});
    }
    return json{{"format", "stitchlab.anchor"},
                {"version", 1},
                {"id", m.id_},
                {"input_dim", m.input_dim_},
                {"num_classes", m.num_classes_},
                {"seed", m.seed_},
                {"dataset_digest", to_hex(m.dataset_digest_)},
                {"frozen", m.frozen_},
                {"stages", stages},
                {"blocks", blocks},
                {"head", {{"weight", detail::tensor_to_json(m.head_weight_)}, {"bias", detail::tensor_to_json(m.head_bias_)}}},
                {"weight_digest", to_hex(m.weight_digest())}};
  }

  static AnchorModel from_json(const detail::json& doc) {
    using detail::field;
    AnchorModel m;
    try {
      m.id_ = field(doc, "id").get<std::string>();
      m.input_dim_ = field(doc, "input_dim").get<std::size_t>();
      m.num_classes_ = field(doc, "num_classes").get<std::size_t>();
      m.seed_ = field(doc, "seed").get<std::uint64_t>();
      m.dataset_digest_ = std::stoull(field(doc, "dataset_digest").get<std::string>(), nullptr, 16);
      m.frozen_ = field(doc, "frozen").get<bool>();
      for (const auto& s : field(doc, "stages")) {
        m.stages_.push_back({field(s, "hidden_dim").get<std::size_t>(), field(s, "num_blocks").get<std::size_t>()});
      }
      std::size_t width = m.input_dim_;
      for (const auto& jb : field(doc, "blocks")) {
        Block b;
        b.spec.in_dim = field(jb, "in_dim").get<std::size_t>();
        b.spec.out_dim = field(jb, "out_dim").get<std::size_t>();
        b.spec.activation = activation_from_string(field(jb, "activation").get<std::string>());
        b.stage = field(jb, "stage").get<std::size_t>();
        b.weight = detail::tensor_from_json(field(jb, "weight"), "block weight");
        b.bias = detail::tensor_from_json(field(jb, "bias"), "block bias");
        if (b.spec.in_dim != width || b.weight.rows() != b.spec.in_dim || b.weight.cols() != b.spec.out_dim ||
            b.bias.rows() != 1 || b.bias.cols() != b.spec.out_dim) {
          throw FormatError("anchor '" + m.id_ + "': inconsistent block shapes");
        }
        width = b.spec.out_dim;
        m.blocks_.push_back(std::move(b));
      }
      const auto& head = field(doc, "head");
      m.head_weight_ = detail::tensor_from_json(field(head, "weight"), "head weight");
      m.head_bias_ = detail::tensor_from_json(field(head, "bias"), "head bias");
      if (m.head_weight_.rows() != width || m.head_weight_.cols() != m.num_classes_) {
        throw FormatError("anchor '" + m.id_ + "': inconsistent head shape");
      }
    } catch (const detail::json::exception& e) {
      throw FormatError(std::string("anchor: ") + e.what());
    }
    std::size_t total_blocks = 0;
    for (const auto& s : m.stages_) total_blocks += s.num_blocks;
    if (total_blocks != m.blocks_.size()) throw FormatError("anchor '" + m.id_ + "': stage spec does not partition blocks");
    if (field(doc, "weight_digest").get<std::string>() != to_hex(m.weight_digest())) {
      throw FormatError("anchor '" + m.id_ + "': weight_digest does not match stored weights");
    }
    return m;
  }
};

void save_anchor(const AnchorModel& anchor, const std::filesystem::path& path) {
  detail::write_json_file(AnchorSerializer::to_json(anchor), path);
}

AnchorModel load_anchor(const std::filesystem::path& path) {
  const auto doc = detail::read_json_file(path);
  detail::require_format(doc, "stitchlab.anchor", 1, path);
  return AnchorSerializer::from_json(doc);
}

}  // namespace stitchlab
