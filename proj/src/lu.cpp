#include "tpn/lu.hpp"

#include <cmath>
#include <numeric>
#include <utility>

#include "tpn/errors.hpp"

namespace tpn {

LuDecomposition::LuDecomposition(std::span<const double> a, std::size_t n, double pivot_tol)
    : n_(n), lu_(a.begin(), a.end()), perm_(n) {
  std::iota(perm_.begin(), perm_.end(), std::size_t{0});
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t best = col;
    double best_abs = std::abs(lu_[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(lu_[r * n + col]);
      if (v > best_abs) {
        best_abs = v;
        best = r;
      }
    }
    if (!(best_abs >= pivot_tol)) throw SingularMatrixError(col, best_abs);
    if (best != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu_[col * n + j], lu_[best * n + j]);
      std::swap(perm_[col], perm_[best]);
    }
    const double pivot = lu_[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      double& lower = lu_[r * n + col];
      lower /= pivot;
      if (lower == 0.0) continue;
      for (std::size_t j = col + 1; j < n; ++j) lu_[r * n + j] -= lower * lu_[col * n + j];
    }
  }
}

void LuDecomposition::solve(std::span<double> b, std::size_t m) const {
  const std::size_t n = n_;
  std::vector<double> x(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x[i * m + j] = b[perm_[i] * m + j];
  // L y = P b, unit diagonal
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lu_[i * n + k];
      if (l == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) x[i * m + j] -= l * x[k * m + j];
    }
  // U x = y
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double u = lu_[ii * n + k];
      if (u == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) x[ii * m + j] -= u * x[k * m + j];
    }
    const double d = lu_[ii * n + ii];
    for (std::size_t j = 0; j < m; ++j) x[ii * m + j] /= d;
  }
  std::copy(x.begin(), x.end(), b.begin());
}

void LuDecomposition::solve_transposed(std::span<double> b, std::size_t m) const {
  // A^T = U^T L^T P, so solve U^T y = b, L^T w = y, then x = P^T w.
  const std::size_t n = n_;
  std::vector<double> w(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double u = lu_[k * n + i];
      if (u == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) w[i * m + j] -= u * w[k * m + j];
    }
    const double d = lu_[i * n + i];
    for (std::size_t j = 0; j < m; ++j) w[i * m + j] /= d;
  }
  for (std::size_t ii = n; ii-- > 0;)
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double l = lu_[k * n + ii];
      if (l == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) w[ii * m + j] -= l * w[k * m + j];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) b[perm_[i] * m + j] = w[i * m + j];
}

std::vector<double> LuDecomposition::inverse() const {
  std::vector<double> inv(n_ * n_, 0.0);
  for (std::size_t i = 0; i < n_; ++i) inv[i * n_ + i] = 1.0;
  solve(inv, n_);
  return inv;
}

namespace {

double norm_l1(std::span<const double> a, std::size_t n) {
  double best = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += std::abs(a[i * n + j]);
    best = std::max(best, col);
  }
  return best;
}

}  // namespace

double condition_number_l1(std::span<const double> a, std::size_t n) {
  try {
    LuDecomposition lu(a, n, 1e-300);
    const auto inv = lu.inverse();
    return norm_l1(a, n) * norm_l1(inv, n);
  } catch (const SingularMatrixError&) {
    return INFINITY;
  }
}

}  // namespace tpn
