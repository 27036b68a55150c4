// Motion-coherence matrix: Gaussian kernel, geodesic augmentation and a
// positive-semidefinite low-rank factorization.
#pragma once

#include "det/core.hpp"

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace det {

/// exp(-dist^2 / (2 beta^2)).
double gaussian_affinity(double dist, double beta);

struct WeightedGraph {
  // adjacency[v] holds (neighbor, edge length) pairs, each undirected edge stored twice
  std::vector<std::vector<std::pair<Index, double>>> adjacency;

  Index size() const { return static_cast<Index>(adjacency.size()); }
  bool has_edge(Index a, Index b) const;
};

/// k-nearest-neighbor graph in the augmented space [y; w * f(y)], symmetrized by union.
WeightedGraph build_augmented_knn_graph(const Matrix& points, const Matrix& features,
                                        double feature_weight, int k);

/// Dijkstra distances from each source (rows) to every vertex (columns).
/// Unreachable vertices get +infinity.
Matrix geodesic_distances(const WeightedGraph& graph, std::span<const Index> sources);

/// G ~= U diag(lambda) U^T with orthonormal U and nonnegative lambda.
struct CoherenceKernel {
  Matrix eigvecs;  // M x rank
  Vector eigvals;  // rank, nonincreasing, >= 0
  double beta = 1.0;
  double tau = 0.0;

  Index size() const { return eigvecs.rows(); }
  Index rank() const { return eigvals.size(); }
  Matrix reconstruct() const;
  /// U diag(sqrt(lambda)): G ~= F F^T.
  Matrix factor() const;
};

/// Default feature scale for the augmented graph: sqrt(zeta) * (spatial std / feature std).
double default_feature_weight(const Matrix& points, const Matrix& features, double zeta);

/// Greedy farthest-point sampling starting from point 0.
std::vector<Index> farthest_point_sample(const Matrix& points, Index count);

/// PSD rank-`rank` factorization of tau * phi(geodesic) + (1 - tau) * phi(euclidean).
/// `graph` may be null when tau == 0. Uses a dense eigendecomposition for small M
/// or full rank, farthest-point landmarks otherwise.
CoherenceKernel factorize_mixed_kernel(const Matrix& points, const WeightedGraph* graph, double beta, double tau,
                                       Index rank);

/// Mixed Euclidean/geodesic Gaussian kernel on the source points, projected onto
/// the PSD cone and truncated to rank params.g_rank (full rank when unset).
CoherenceKernel surface_coherence(const Matrix& points, const Matrix& features, const HyperParams& params);

/// Number of kNN graphs built so far in this process.
std::size_t graph_build_count();

}  // namespace det
