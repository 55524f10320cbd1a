#include "stitchlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stitchlab/errors.hpp"

namespace stitchlab {

namespace {

void require_shape(bool ok, std::string_view op, const Tensor& a, const Tensor& b) {
  if (ok) return;
  throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

void check_labels(const Tensor& probs, std::span<const std::size_t> labels) {
  if (labels.size() != probs.rows()) throw InvalidInput("label count does not match batch size");
  for (auto y : labels) {
    if (y >= probs.cols()) throw InvalidInput("label out of range");
  }
}

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (!std::isfinite(fill)) throw InvalidInput("Tensor: non-finite fill value");
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw InvalidInput("Tensor: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }
  require_finite(*this, "Tensor");
}

Tensor Tensor::row_vector(std::initializer_list<double> values) {
  return Tensor(1, values.size(), std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::slice_rows(std::size_t first, std::size_t count) const {
  if (first + count > rows_) throw InvalidInput("slice_rows: range out of bounds");
  Tensor out(count, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_), count * cols_,
              out.data_.begin());
  return out;
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  Tensor out(indices.size(), cols_);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows_) throw InvalidInput("gather_rows: index out of bounds");
    std::copy_n(row(indices[r]).begin(), cols_, out.row(r).begin());
  }
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view what) {
  if (!t.all_finite()) throw InvalidInput(std::string(what) + ": non-finite value");
}

ProbDist::ProbDist(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw InvalidInput("ProbDist: empty");
  double sum = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) throw InvalidInput("ProbDist: entries must be finite and >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidInput("ProbDist: entries must sum to 1");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn", a, b);
  Tensor out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto a_row = a.row(r);
    const auto b_row = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ai = a_row[i];
      if (ai == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += ai * b_row[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_shape(bias.rows() == 1 && bias.cols() == weight.cols(), "affine(bias)", weight, bias);
  Tensor out = matmul(x, weight);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bias(0, c);
  }
  return out;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(Tensor& grad, const Tensor& relu_output) {
  require_shape(grad.same_shape(relu_output), "relu_backward", grad, relu_output);
  auto g = grad.values();
  auto y = relu_output.values();
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!(y[k] > 0.0)) g[k] = 0.0;
  }
}

ProbDist softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty logits");
  for (double v : logits) {
    if (!std::isfinite(v)) throw InvalidInput("softmax: non-finite logit");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    probs[k] = std::exp(logits[k] - peak);
    total += probs[k];
  }
  for (double& p : probs) p /= total;
  return ProbDist(std::move(probs));
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto dist = softmax(logits.row(r));
    std::copy(dist.probs().begin(), dist.probs().end(), out.row(r).begin());
  }
  return out;
}

double cross_entropy(const ProbDist& pred, std::size_t label) {
  if (label >= pred.size()) throw InvalidInput("cross_entropy: label out of range");
  return -std::log(pred[label] + kLogEpsilon);
}

double mean_cross_entropy(const Tensor& probs, std::span<const std::size_t> labels) {
  check_labels(probs, labels);
  if (labels.empty()) throw InvalidInput("mean_cross_entropy: empty batch");
  double total = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) total -= std::log(probs(r, labels[r]) + kLogEpsilon);
  return total / static_cast<double>(probs.rows());
}

Tensor softmax_cross_entropy_grad(const Tensor& probs, std::span<const std::size_t> labels) {
  check_labels(probs, labels);
  Tensor grad = probs;
  const double scale = 1.0 / static_cast<double>(probs.rows());
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    grad(r, labels[r]) -= 1.0;
    for (double& v : grad.row(r)) v *= scale;
  }
  return grad;
}

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = t.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(const Tensor& probs, std::span<const std::size_t> labels) {
  check_labels(probs, labels);
  if (labels.empty()) throw InvalidInput("accuracy: empty batch");
  const auto predicted = argmax_rows(probs);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) correct += predicted[r] == labels[r] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

AffineGrads affine_backward(const Tensor& input, const Tensor& weight, const Tensor& upstream) {
  require_shape(input.cols() == weight.rows(), "affine_backward(input, weight)", input, weight);
  require_shape(upstream.rows() == input.rows() && upstream.cols() == weight.cols(),
                "affine_backward(upstream)", upstream, weight);
  AffineGrads grads;
  grads.weight = matmul_tn(input, upstream);
  grads.bias = Tensor(1, upstream.cols());
  for (std::size_t r = 0; r < upstream.rows(); ++r)
    for (std::size_t c = 0; c < upstream.cols(); ++c) grads.bias(0, c) += upstream(r, c);
  grads.input = matmul_nt(upstream, weight);
  return grads;
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
  if (params.size() != grads.size()) throw InvalidInput("sgd_step: parameter/gradient count mismatch");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidInput("sgd_step: lr must be positive");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_shape(params[k]->same_shape(*grads[k]), "sgd_step", *params[k], *grads[k]);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->values();
    auto g = grads[k]->values();
    for (std::size_t e = 0; e < p.size(); ++e) p[e] -= lr * g[e];
    require_finite(*params[k], "sgd_step");
  }
}

}  // namespace stitchlab
