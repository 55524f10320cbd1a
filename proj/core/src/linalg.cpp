#include "stitchlab/linalg.hpp"

#include <cmath>

#include "stitchlab/errors.hpp"

namespace stitchlab {

namespace {

// Lower-triangular factor of a + ridge·I, or false if a pivot is not positive.
bool cholesky(const Tensor& a, double ridge, Tensor& lower) {
  const std::size_t n = a.rows();
  lower = Tensor(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j) + ridge;
    for (std::size_t k = 0; k < j; ++k) diag -= lower(j, k) * lower(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) return false;
    const double pivot = std::sqrt(diag);
    lower(j, j) = pivot;
    for (std::size_t i = j + 1; i < n; ++i) {
      double acc = a(i, j);
      for (std::size_t k = 0; k < j; ++k) acc -= lower(i, k) * lower(j, k);
      lower(i, j) = acc / pivot;
    }
  }
  return true;
}

}  // namespace

Tensor solve_spd(const Tensor& a, const Tensor& b, double ridge, double* used_ridge) {
  if (a.rows() != a.cols()) throw InvalidInput("solve_spd: matrix must be square");
  if (b.rows() != a.rows()) throw InvalidInput("solve_spd: right-hand side row mismatch");
  if (ridge < 0.0) throw InvalidInput("solve_spd: ridge must be >= 0");
  require_finite(a, "solve_spd");
  require_finite(b, "solve_spd");

  double scale = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) scale = std::max(scale, std::abs(a(i, i)));
  double lambda = ridge;
  Tensor lower;
  while (!cholesky(a, lambda, lower)) {
    lambda = lambda > 0.0 ? lambda * 10.0 : std::max(1e-12, scale * 1e-15);
    if (lambda > 1e300) throw NumericError("solve_spd: could not regularize system");
  }
  if (used_ridge) *used_ridge = lambda;

  const std::size_t n = a.rows();
  Tensor x = b;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = x(i, c);
      for (std::size_t k = 0; k < i; ++k) acc -= lower(i, k) * x(k, c);
      x(i, c) = acc / lower(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double acc = x(i, c);
      for (std::size_t k = i + 1; k < n; ++k) acc -= lower(k, i) * x(k, c);
      x(i, c) = acc / lower(i, i);
    }
  }
  return x;
}

AffineMap fit_affine_least_squares(const Tensor& x, const Tensor& y, double ridge) {
  if (x.rows() != y.rows()) throw InvalidInput("fit_affine_least_squares: row-count mismatch");
  if (x.rows() == 0) throw InvalidInput("fit_affine_least_squares: empty batch");
  const std::size_t in = x.cols();
  Tensor augmented(x.rows(), in + 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < in; ++c) augmented(r, c) = x(r, c);
    augmented(r, in) = 1.0;
  }
  const Tensor gram = matmul_tn(augmented, augmented);
  const Tensor rhs = matmul_tn(augmented, y);
  const Tensor solution = solve_spd(gram, rhs, ridge);

  AffineMap map{solution.slice_rows(0, in), solution.slice_rows(in, 1)};
  return map;
}

double affine_residual(const AffineMap& map, const Tensor& x, const Tensor& y) {
  const Tensor predicted = affine(x, map.weight, map.bias);
  if (!predicted.same_shape(y)) throw InvalidInput("affine_residual: output shape mismatch");
  double total = 0.0;
  auto p = predicted.values();
  auto t = y.values();
  for (std::size_t k = 0; k < p.size(); ++k) total += (p[k] - t[k]) * (p[k] - t[k]);
  return total;
}

}  // namespace stitchlab
