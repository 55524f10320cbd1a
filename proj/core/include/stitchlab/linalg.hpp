#pragma once

#include "stitchlab/tensor.hpp"

namespace stitchlab {

/// Affine map y = x·weight + bias.
struct AffineMap {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out
};

/// Solves (A + ridge·I)·X = B for symmetric positive semi-definite A using a
/// Cholesky factorization. If the factorization breaks down the ridge is
/// raised tenfold until it succeeds, so the call never fails on finite input.
/// Returns the ridge that was finally used through `used_ridge` when non-null.
Tensor solve_spd(const Tensor& a, const Tensor& b, double ridge, double* used_ridge = nullptr);

/// Least-squares affine fit: argmin ‖[x, 1]·[W; b] − y‖² + ridge·‖[W; b]‖²
/// via the normal equations.
AffineMap fit_affine_least_squares(const Tensor& x, const Tensor& y, double ridge = 1e-8);

/// Sum of squared residuals ‖x·W + b − y‖².
double affine_residual(const AffineMap& map, const Tensor& x, const Tensor& y);

}  // namespace stitchlab
