#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "xunc/error.hpp"

namespace xunc::linalg {

// Row-major square matrix stored as a flat vector.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  explicit SquareMatrix(std::size_t size) : n(size), a(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

/// Solves A x = b for symmetric positive definite A via Cholesky.
inline std::vector<double> cholesky_solve(SquareMatrix A, std::vector<double> b) {
  const std::size_t n = A.n;
  if (b.size() != n) throw ArgumentError("cholesky_solve: size mismatch");
  // A <- L (lower triangle).
  for (std::size_t j = 0; j < n; ++j) {
    double d = A(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= A(j, k) * A(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericalError("normal equations are singular or not positive definite");
    }
    const double ljj = std::sqrt(d);
    A(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = A(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= A(i, k) * A(j, k);
      A(i, j) = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= A(i, k) * b[k];
    b[i] = s / A(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= A(k, i) * b[k];
    b[i] = s / A(i, i);
  }
  return b;
}

}  // namespace xunc::linalg
