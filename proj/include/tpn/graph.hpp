#pragma once

#include <cstddef>

#include "tpn/tensor.hpp"

namespace tpn {

inline constexpr std::size_t kDefaultGraphK = 20;
inline constexpr double kDegreeFloor = 1e-12;

/// Neighborhood graph over the union of support and query examples.
struct EpisodeGraph {
  std::size_t n = 0;
  std::size_t k = 0;      // neighbors kept per row, after clamping
  Tensor distances;       // ||f_i/s_i - f_j/s_j||^2
  Tensor similarity;      // exp(-D/2), zero diagonal
  Tensor pruned;          // row-wise top-k, symmetrized by max
  Tensor normalized;      // D^-1/2 W_k D^-1/2
  Tensor sigmas;
};

/// D_ij = ||f_i / s_i - f_j / s_j||^2 (squared Euclidean).
Tensor scaled_distances(const Tensor& features, const Tensor& sigmas);

/// W = exp(-D / 2) with the diagonal forced to zero.
Tensor similarity(const Tensor& distances);

/// Keeps the k largest entries of each row (ties favor the lower column),
/// zeroes the rest and symmetrizes with max(M, M^T). The kept mask is a
/// constant for differentiation. Requires 1 <= k <= n - 1.
Tensor knn_prune(const Tensor& w, std::size_t k);

/// D^-1/2 W_k D^-1/2 with degrees floored at kDegreeFloor.
Tensor normalized_laplacian(const Tensor& pruned);

/// min(k, n - 1), and at least 1.
std::size_t clamp_k(std::size_t k, std::size_t n);

/// Full construction from flat features (n x d) and per-example scales.
EpisodeGraph build_graph(const Tensor& features, const Tensor& sigmas, std::size_t k = kDefaultGraphK);

/// Largest |eigenvalue| of a symmetric matrix by power iteration.
double spectral_radius(const Tensor& symmetric, std::size_t max_iters = 10000, double tol = 1e-13);

}  // namespace tpn
