#include "tpn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tpn/errors.hpp"

namespace tpn {

Tensor scaled_distances(const Tensor& features, const Tensor& sigmas) {
  if (features.rank() != 2) throw DimensionError("scaled_distances: features must be n x d, got " + shape_str(features.shape()));
  return pairwise_sqdist(div_rows(features, sigmas));
}

Tensor similarity(const Tensor& distances) {
  const std::size_t n = distances.dim(0);
  std::vector<double> offdiag(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) offdiag[i * n + i] = 0.0;
  return mask_mul(exp(scale(distances, -0.5)), offdiag);
}

Tensor knn_prune(const Tensor& w, std::size_t k) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) throw DimensionError("knn_prune: W must be square, got " + shape_str(w.shape()));
  const std::size_t n = w.dim(0);
  if (k < 1 || k + 1 > n)
    throw ConfigError("knn_prune: k=" + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
  std::vector<double> keep(n * n, 0.0);
  std::vector<std::size_t> cols;
  const auto v = w.data();
  for (std::size_t i = 0; i < n; ++i) {
    // every column except the diagonal
    cols.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) cols.push_back(j);
    std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(k), cols.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double va = v[i * n + a], vb = v[i * n + b];
                        return va != vb ? va > vb : a < b;
                      });
    for (std::size_t r = 0; r < k; ++r) keep[i * n + cols[r]] = 1.0;
  }
  return sym_max(mask_mul(w, keep));
}

Tensor normalized_laplacian(const Tensor& pruned) { return normalized_adjacency(pruned, kDegreeFloor); }

std::size_t clamp_k(std::size_t k, std::size_t n) {
  if (n < 2) throw ConfigError("graph needs at least 2 nodes");
  return std::max<std::size_t>(1, std::min(k, n - 1));
}

EpisodeGraph build_graph(const Tensor& features, const Tensor& sigmas, std::size_t k) {
  EpisodeGraph g;
  g.n = features.dim(0);
  g.k = clamp_k(k, g.n);
  g.sigmas = sigmas;
  g.distances = scaled_distances(features, sigmas);
  g.similarity = similarity(g.distances);
  g.pruned = knn_prune(g.similarity, g.k);
  g.normalized = normalized_laplacian(g.pruned);
  return g;
}

double spectral_radius(const Tensor& symmetric, std::size_t max_iters, double tol) {
  // Power iteration on S^2 (all eigenvalues >= 0, so no sign oscillation);
  // the Rayleigh quotient of S^2 converges to rho(S)^2 from below.
  const std::size_t n = symmetric.dim(0);
  const auto s = symmetric.data();
  std::vector<double> x(n), y(n), z(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 + 0.01 * static_cast<double>((i * 7919) % 101);
  auto normalize = [](std::vector<double>& v) {
    double nrm = 0.0;
    for (double e : v) nrm += e * e;
    nrm = std::sqrt(nrm);
    if (nrm > 0.0)
      for (double& e : v) e /= nrm;
    return nrm;
  };
  auto apply = [&](const std::vector<double>& in, std::vector<double>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += s[i * n + j] * in[j];
      out[i] = acc;
    }
  };
  normalize(x);
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    apply(x, y);
    apply(y, z);
    double rq = 0.0;
    for (std::size_t i = 0; i < n; ++i) rq += x[i] * z[i];
    const double nrm = normalize(z);
    if (nrm == 0.0) return 0.0;
    x.swap(z);
    if (std::abs(rq - lambda) <= tol * std::max(1.0, rq)) {
      lambda = rq;
      break;
    }
    lambda = rq;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

}  // namespace tpn
