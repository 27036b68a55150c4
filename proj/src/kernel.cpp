#include "det/kernel.hpp"

#include "det/kdtree.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <queue>

namespace det {

namespace {

std::atomic<std::size_t> g_graph_builds{0};

// Above this size a rank-deficient request switches to landmark factorization.
constexpr Index kDenseFactorLimit = 600;

double mixed_affinity(double euclid, double geodesic, double beta, double tau) {
  double value = (1.0 - tau) * gaussian_affinity(euclid, beta);
  if (tau > 0.0) value += tau * (std::isinf(geodesic) ? 0.0 : gaussian_affinity(geodesic, beta));
  return value;
}

// Symmetric PSD factor of a (possibly indefinite) symmetric matrix: keep the
// top `rank` eigenpairs and clamp negative eigenvalues to zero.
CoherenceKernel truncated_eigen(const Matrix& gram, Index rank) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition of the coherence matrix failed");
  const Index m = gram.rows();
  CoherenceKernel k;
  k.eigvecs.resize(m, rank);
  k.eigvals.resize(rank);
  for (Index j = 0; j < rank; ++j) {
    const Index src = m - 1 - j;  // ascending order from Eigen
    k.eigvecs.col(j) = eig.eigenvectors().col(src);
    k.eigvals(j) = std::max(0.0, eig.eigenvalues()(src));
  }
  return k;
}

CoherenceKernel nystrom_factor(const Matrix& cross, std::span<const Index> landmarks) {
  const Index r = static_cast<Index>(landmarks.size());
  Matrix inner(r, r);
  for (Index a = 0; a < r; ++a)
    for (Index b = 0; b < r; ++b) inner(a, b) = cross(landmarks[a], b);
  inner = 0.5 * (inner + inner.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Matrix> eig(inner);
  if (eig.info() != Eigen::Success) throw NumericalError("landmark eigendecomposition failed");
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  std::vector<Index> keep;
  for (Index j = r - 1; j >= 0; --j)
    if (eig.eigenvalues()(j) > 1e-12 * top) keep.push_back(j);

  // B B^T is the Nystrom approximation restricted to the PSD part of the landmark block.
  Matrix b(cross.rows(), static_cast<Index>(keep.size()));
  for (Index j = 0; j < static_cast<Index>(keep.size()); ++j)
    b.col(j) = cross * eig.eigenvectors().col(keep[j]) / std::sqrt(eig.eigenvalues()(keep[j]));

  // Orthonormalize: B = U diag(sqrt(omega)) Q^T.
  Eigen::SelfAdjointEigenSolver<Matrix> small(b.transpose() * b);
  const Index q = b.cols();
  const double stop = std::max(small.eigenvalues().maxCoeff(), 0.0);
  CoherenceKernel k;
  std::vector<Index> cols;
  for (Index j = q - 1; j >= 0; --j)
    if (small.eigenvalues()(j) > 1e-12 * stop) cols.push_back(j);
  k.eigvecs.resize(cross.rows(), static_cast<Index>(cols.size()));
  k.eigvals.resize(static_cast<Index>(cols.size()));
  for (Index j = 0; j < static_cast<Index>(cols.size()); ++j) {
    const double w = small.eigenvalues()(cols[j]);
    k.eigvecs.col(j) = b * small.eigenvectors().col(cols[j]) / std::sqrt(w);
    k.eigvals(j) = w;
  }
  return k;
}

}  // namespace

double gaussian_affinity(double dist, double beta) { return std::exp(-dist * dist / (2.0 * beta * beta)); }

bool WeightedGraph::has_edge(Index a, Index b) const {
  for (const auto& [v, w] : adjacency[static_cast<std::size_t>(a)])
    if (v == b) return true;
  return false;
}

WeightedGraph build_augmented_knn_graph(const Matrix& points, const Matrix& features, double feature_weight,
                                        int k) {
  const Index m = points.cols();
  if (k < 1 || k >= m) throw ParameterError("knn graph degree must satisfy 1 <= k < M");
  ++g_graph_builds;

  const bool augmented = feature_weight > 0.0;
  Matrix coords(points.rows() + (augmented ? features.rows() : 0), m);
  coords.topRows(points.rows()) = points;
  if (augmented) coords.bottomRows(features.rows()) = feature_weight * features;

  KdTree tree(coords);
  WeightedGraph graph;
  graph.adjacency.resize(static_cast<std::size_t>(m));
  std::vector<double> q(static_cast<std::size_t>(coords.rows()));
  for (Index i = 0; i < m; ++i) {
    for (Index d = 0; d < coords.rows(); ++d) q[static_cast<std::size_t>(d)] = coords(d, i);
    // k + 1 to account for the point itself; duplicates may also appear at distance 0.
    auto nn = tree.knn(q.data(), k + 1);
    int added = 0;
    for (const auto& nb : nn) {
      if (nb.index == i) continue;
      if (added == k) break;
      ++added;
      const double w = std::sqrt(nb.dist2);
      if (!graph.has_edge(i, nb.index)) {
        graph.adjacency[static_cast<std::size_t>(i)].emplace_back(nb.index, w);
        graph.adjacency[static_cast<std::size_t>(nb.index)].emplace_back(i, w);
      }
    }
  }
  return graph;
}

Matrix geodesic_distances(const WeightedGraph& graph, std::span<const Index> sources) {
  const Index m = graph.size();
  Matrix out(static_cast<Index>(sources.size()), m);
  using Item = std::pair<double, Index>;
  std::vector<double> dist(static_cast<std::size_t>(m));
  for (Index s = 0; s < static_cast<Index>(sources.size()); ++s) {
    std::fill(dist.begin(), dist.end(), kInfinity);
    std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
    dist[static_cast<std::size_t>(sources[s])] = 0.0;
    queue.emplace(0.0, sources[s]);
    while (!queue.empty()) {
      const auto [d, v] = queue.top();
      queue.pop();
      if (d > dist[static_cast<std::size_t>(v)]) continue;
      for (const auto& [u, w] : graph.adjacency[static_cast<std::size_t>(v)]) {
        const double nd = d + w;
        if (nd < dist[static_cast<std::size_t>(u)]) {
          dist[static_cast<std::size_t>(u)] = nd;
          queue.emplace(nd, u);
        }
      }
    }
    for (Index v = 0; v < m; ++v) out(s, v) = dist[static_cast<std::size_t>(v)];
  }
  return out;
}

Matrix CoherenceKernel::reconstruct() const {
  return eigvecs * eigvals.asDiagonal() * eigvecs.transpose();
}

Matrix CoherenceKernel::factor() const { return eigvecs * eigvals.cwiseSqrt().asDiagonal(); }

double default_feature_weight(const Matrix& points, const Matrix& features, double zeta) {
  const double spatial = summarize_domain(points).scale;
  const double functional = summarize_domain(features).scale;
  if (!(functional > 0.0) || zeta <= 0.0) return 0.0;
  return std::sqrt(zeta) * spatial / functional;
}

std::vector<Index> farthest_point_sample(const Matrix& points, Index count) {
  const Index m = points.cols();
  count = std::min(count, m);
  std::vector<Index> picked;
  if (count <= 0) return picked;
  picked.reserve(static_cast<std::size_t>(count));
  Vector best = Vector::Constant(m, kInfinity);
  Index next = 0;
  for (Index c = 0; c < count; ++c) {
    picked.push_back(next);
    const auto anchor = points.col(next);
    Index arg = 0;
    double far = -1.0;
    for (Index i = 0; i < m; ++i) {
      best(i) = std::min(best(i), (points.col(i) - anchor).squaredNorm());
      if (best(i) > far) {
        far = best(i);
        arg = i;
      }
    }
    next = arg;
  }
  return picked;
}

CoherenceKernel factorize_mixed_kernel(const Matrix& points, const WeightedGraph* graph, double beta, double tau,
                                       Index rank) {
  const Index m = points.cols();
  if (rank < 1 || rank > m) throw ParameterError("kernel rank K must satisfy 1 <= K <= M");
  if (tau > 0.0 && graph == nullptr) throw ParameterError("geodesic mixing requires a neighbor graph");

  CoherenceKernel out;
  if (rank == m || m <= kDenseFactorLimit) {
    Matrix geo;
    if (tau > 0.0) {
      std::vector<Index> all(static_cast<std::size_t>(m));
      for (Index i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = i;
      geo = geodesic_distances(*graph, all);
    }
    Matrix gram(m, m);
    for (Index j = 0; j < m; ++j)
      for (Index i = j; i < m; ++i) {
        const double g = tau > 0.0 ? 0.5 * (geo(i, j) + geo(j, i)) : 0.0;
        gram(i, j) = gram(j, i) = mixed_affinity((points.col(i) - points.col(j)).norm(), g, beta, tau);
      }
    out = truncated_eigen(gram, rank);
  } else {
    const auto landmarks = farthest_point_sample(points, rank);
    Matrix geo;
    if (tau > 0.0) geo = geodesic_distances(*graph, landmarks);
    Matrix cross(m, rank);
    for (Index j = 0; j < rank; ++j) {
      const auto anchor = points.col(landmarks[static_cast<std::size_t>(j)]);
      for (Index i = 0; i < m; ++i)
        cross(i, j) = mixed_affinity((points.col(i) - anchor).norm(), tau > 0.0 ? geo(j, i) : 0.0, beta, tau);
    }
    out = nystrom_factor(cross, landmarks);
  }
  out.beta = beta;
  out.tau = tau;
  return out;
}

CoherenceKernel surface_coherence(const Matrix& points, const Matrix& features, const HyperParams& params) {
  const Index m = points.cols();
  if (params.tau > 0.0 && !params.g_rank)
    throw ParameterError("nonzero tau requires the kernel rank K to be set");
  const Index rank = params.g_rank ? static_cast<Index>(*params.g_rank) : m;
  if (rank > m) throw ParameterError("kernel rank K exceeds the number of source points");

  if (params.tau <= 0.0) return factorize_mixed_kernel(points, nullptr, params.beta, 0.0, rank);

  const double zeta = compute_zeta(params.eta, points.rows(), features.rows());
  const double weight = params.feature_weight.value_or(default_feature_weight(points, features, zeta));
  const int k = static_cast<int>(std::min<Index>(params.knn_k, m - 1));
  const WeightedGraph graph = build_augmented_knn_graph(points, features, weight, k);
  return factorize_mixed_kernel(points, &graph, params.beta, params.tau, rank);
}

std::size_t graph_build_count() { return g_graph_builds.load(); }

}  // namespace det
