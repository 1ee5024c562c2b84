#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace tpn {

/// Dense LU factorization with partial pivoting, P A = L U, row-major.
class LuDecomposition {
 public:
  /// Throws SingularMatrixError when |pivot| < pivot_tol.
  LuDecomposition(std::span<const double> a, std::size_t n, double pivot_tol = 1e-12);

  std::size_t size() const noexcept { return n_; }

  /// Solves A X = B in place for B of shape n x m.
  void solve(std::span<double> b, std::size_t m) const;
  /// Solves A^T X = B in place for B of shape n x m.
  void solve_transposed(std::span<double> b, std::size_t m) const;

  std::vector<double> inverse() const;

 private:
  std::size_t n_;
  std::vector<double> lu_;
  std::vector<std::size_t> perm_;  // row i of P A is row perm_[i] of A
};

/// ||A||_1 * ||A^-1||_1.
double condition_number_l1(std::span<const double> a, std::size_t n);

}  // namespace tpn
