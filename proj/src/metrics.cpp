#include "det/metrics.hpp"

#include "det/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

namespace det {

namespace {

using Key = std::array<std::int64_t, 3>;

std::set<Key> occupied(const Matrix& pts, double cell) {
  std::set<Key> cells;
  for (Index i = 0; i < pts.cols(); ++i) {
    Key key{0, 0, 0};
    for (Index d = 0; d < pts.rows(); ++d)
      key[static_cast<std::size_t>(d)] = static_cast<std::int64_t>(std::floor(pts(d, i) / cell));
    cells.insert(key);
  }
  return cells;
}

}  // namespace

double jaccard_index(const Matrix& a, const Matrix& b, double cell_size) {
  if (!(cell_size > 0.0)) throw ParameterError("Jaccard cell size must be positive");
  if (a.cols() == 0 && b.cols() == 0) throw DegenerateInputError("Jaccard index of two empty sets is undefined");
  if (a.cols() > 0 && b.cols() > 0 && a.rows() != b.rows()) throw ParameterError("point sets differ in dimension");
  if (std::max(a.rows(), b.rows()) > 3) throw ParameterError("Jaccard index supports at most three dimensions");
  const auto ca = occupied(a, cell_size);
  const auto cb = occupied(b, cell_size);
  std::size_t common = 0;
  for (const auto& key : ca) common += cb.count(key);
  return static_cast<double>(common) / static_cast<double>(ca.size() + cb.size() - common);
}

double topology_score(const Matrix& before, const Matrix& after, int k) {
  const Index n = before.cols();
  if (after.cols() != n) throw ParameterError("topology score needs matching point counts");
  if (k < 1 || n <= k) throw ParameterError("topology score needs more than k points");
  const Matrix b = before, a = after;
  const KdTree tb(b), ta(a);

  auto neighbors = [k](const KdTree& tree, const Matrix& pts, Index i) {
    std::vector<Index> out;
    for (const auto& nb : tree.knn(pts.col(i).data(), k + 1))
      if (nb.index != i && static_cast<int>(out.size()) < k) out.push_back(nb.index);
    std::sort(out.begin(), out.end());
    return out;
  };

  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto nb = neighbors(tb, b, i);
    const auto na = neighbors(ta, a, i);
    std::vector<Index> both;
    std::set_intersection(nb.begin(), nb.end(), na.begin(), na.end(), std::back_inserter(both));
    total += static_cast<double>(both.size()) / k;
  }
  return total / static_cast<double>(n);
}

std::optional<double> smoothed_pcc(const Matrix& source_features, const Matrix& target_features,
                                   const Matrix& registered_points, const Matrix& target_points, int k) {
  if (source_features.rows() != target_features.rows()) throw ParameterError("feature dimensions differ");
  if (source_features.cols() != registered_points.cols() || target_features.cols() != target_points.cols())
    throw ParameterError("feature and point counts differ");
  if (target_points.cols() == 0 || registered_points.cols() == 0) throw DegenerateInputError("empty point set");
  if (k < 1) throw ParameterError("k must be positive");

  const Matrix tp = target_points;
  const KdTree tree(tp);
  const Index fdim = target_features.rows();
  const Index m = registered_points.cols();
  std::vector<std::optional<Vector>> smoothed(static_cast<std::size_t>(tp.cols()));

  Matrix local(fdim, m);
  for (Index i = 0; i < m; ++i) {
    const Vector q = registered_points.col(i);
    const Index nearest = tree.knn(q.data(), 1).front().index;
    auto& cache = smoothed[static_cast<std::size_t>(nearest)];
    if (!cache) {
      Vector mean = Vector::Zero(fdim);
      const auto hood = tree.knn(tp.col(nearest).data(), k);
      for (const auto& nb : hood) mean += target_features.col(nb.index);
      cache = mean / static_cast<double>(hood.size());
    }
    local.col(i) = *cache;
  }

  const auto x = source_features.array() - source_features.mean();
  const auto y = local.array() - local.mean();
  const double sxx = x.square().sum(), syy = y.square().sum();
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return std::clamp((x * y).sum() / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::optional<double> mean_gt_residual(const Matrix& registered_points, const Matrix& target_points,
                                       std::span<const Index> correspondence) {
  if (static_cast<Index>(correspondence.size()) != target_points.cols())
    throw ParameterError("one correspondence entry per target point is required");
  double total = 0.0;
  Index count = 0;
  for (Index n = 0; n < target_points.cols(); ++n) {
    const Index m = correspondence[static_cast<std::size_t>(n)];
    if (m < 0) continue;
    if (m >= registered_points.cols()) throw ParameterError("correspondence index out of range");
    total += (target_points.col(n) - registered_points.col(m)).norm();
    ++count;
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

std::string MetricReport::to_text() const {
  std::string out;
  auto line = [&out](const char* key, const std::optional<double>& v) {
    out += key;
    out += '=';
    if (v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", *v);
      out += buf;
    } else {
      out += "NA";
    }
    out += '\n';
  };
  line("jaccard", jaccard);
  line("topology_score", topology_score);
  line("smoothed_pcc", smoothed_pcc);
  line("mean_gt_residual", mean_gt_residual);
  return out;
}

}  // namespace det
