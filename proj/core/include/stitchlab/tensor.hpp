#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace stitchlab {

/// Dense row-major matrix of doubles. Vectors are 1×n tensors.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Throws InvalidInput if values.size() != rows*cols or any value is non-finite.
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Tensor row_vector(std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  /// Rows [first, first+count) as a new tensor.
  Tensor slice_rows(std::size_t first, std::size_t count) const;
  /// Gathers the given rows in order.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  bool same_shape(const Tensor& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Throws InvalidInput naming `what` when t contains NaN or Inf.
void require_finite(const Tensor& t, std::string_view what);

/// A probability vector: non-negative entries summing to one.
class ProbDist {
 public:
  /// Validates the invariant (entries >= 0, sum within 1e-9 of 1).
  explicit ProbDist(std::vector<double> probs);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t k) const { return probs_[k]; }
  std::span<const double> probs() const { return probs_; }

 private:
  std::vector<double> probs_;
};

/// Floor added inside every logarithm.
inline constexpr double kLogEpsilon = 1e-12;

Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ·b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// x·W + b, with b a 1×out row broadcast over the batch.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
void relu_inplace(Tensor& t);
/// Zeroes grad entries where the ReLU output was not positive.
void relu_backward_inplace(Tensor& grad, const Tensor& relu_output);

/// Max-subtracted softmax of one logit row.
ProbDist softmax(std::span<const double> logits);
/// Row-wise softmax; every row of the result is a distribution.
Tensor softmax_rows(const Tensor& logits);

/// −log(pred[label] + ε).
double cross_entropy(const ProbDist& pred, std::size_t label);
/// Mean cross-entropy over rows of a probability tensor.
double mean_cross_entropy(const Tensor& probs, std::span<const std::size_t> labels);
/// Gradient of mean_cross_entropy(softmax(logits)) with respect to the logits.
Tensor softmax_cross_entropy_grad(const Tensor& probs, std::span<const std::size_t> labels);

std::vector<std::size_t> argmax_rows(const Tensor& t);
/// Fraction of rows whose argmax equals the label. Ties resolve to the lowest class.
double accuracy(const Tensor& probs, std::span<const std::size_t> labels);

struct AffineGrads {
  Tensor weight;
  Tensor bias;
  Tensor input;
};

/// Gradients of y = x·W + b given dL/dy.
AffineGrads affine_backward(const Tensor& input, const Tensor& weight, const Tensor& upstream);

/// params[k] -= lr * grads[k], elementwise.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr);

}  // namespace stitchlab
