#include "det/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace det {

KdTree::KdTree(const Matrix& points, int leaf_size)
    : dim_(points.rows()), count_(points.cols()), leaf_size_(std::max(1, leaf_size)) {
  order_.resize(static_cast<std::size_t>(count_));
  std::iota(order_.begin(), order_.end(), Index{0});
  coords_.resize(static_cast<std::size_t>(count_ * dim_));
  for (Index i = 0; i < count_; ++i)
    for (Index d = 0; d < dim_; ++d) coords_[static_cast<std::size_t>(i * dim_ + d)] = points(d, i);
  if (count_ > 0) {
    nodes_.reserve(static_cast<std::size_t>(2 * count_ / leaf_size_ + 2));
    build(0, count_);
  }
  // Re-pack coordinates into tree order for locality.
  std::vector<double> packed(coords_.size());
  for (Index slot = 0; slot < count_; ++slot) {
    const Index src = order_[static_cast<std::size_t>(slot)];
    std::copy_n(coords_.begin() + src * dim_, dim_, packed.begin() + slot * dim_);
  }
  coords_.swap(packed);
}

Index KdTree::build(Index begin, Index end) {
  const Index id = static_cast<Index>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= leaf_size_) return id;

  // Split along the widest axis at the median.
  int best_dim = 0;
  double best_spread = -1.0;
  for (Index d = 0; d < dim_; ++d) {
    double lo = kInfinity, hi = -kInfinity;
    for (Index i = begin; i < end; ++i) {
      const double v = coords_[static_cast<std::size_t>(order_[i] * dim_ + d)];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo > best_spread) {
      best_spread = hi - lo;
      best_dim = static_cast<int>(d);
    }
  }
  if (best_spread <= 0.0) return id;  // all coincident: keep as a leaf

  const Index mid = begin + (end - begin) / 2;
  auto value = [&](Index idx) { return coords_[static_cast<std::size_t>(idx * dim_ + best_dim)]; };
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Index a, Index b) { return value(a) < value(b); });
  const double split = value(order_[mid]);

  nodes_[id].split_dim = best_dim;
  nodes_[id].split = split;
  const Index left = build(begin, mid);
  const Index right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double KdTree::dist2_to(const double* query, Index slot) const {
  const double* p = coords_.data() + slot * dim_;
  double acc = 0.0;
  for (Index d = 0; d < dim_; ++d) {
    const double diff = p[d] - query[d];
    acc += diff * diff;
  }
  return acc;
}

std::vector<Neighbor> KdTree::knn(const double* query, Index k) const {
  std::vector<Neighbor> heap;
  if (count_ == 0 || k <= 0) return heap;
  k = std::min(k, count_);
  heap.reserve(static_cast<std::size_t>(k + 1));
  knn_recurse(0, query, k, heap);
  std::sort_heap(heap.begin(), heap.end(), closer);
  return heap;
}

void KdTree::knn_recurse(Index node_id, const double* query, Index k, std::vector<Neighbor>& heap) const {
  const Node& node = nodes_[static_cast<std::size_t>(node_id)];
  if (node.split_dim < 0) {
    for (Index slot = node.begin; slot < node.end; ++slot) {
      const Neighbor cand{order_[static_cast<std::size_t>(slot)], dist2_to(query, slot)};
      if (static_cast<Index>(heap.size()) < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), closer);
      } else if (closer(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), closer);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), closer);
      }
    }
    return;
  }
  const double diff = query[node.split_dim] - node.split;
  const Index near = diff < 0.0 ? node.left : node.right;
  const Index far = diff < 0.0 ? node.right : node.left;
  knn_recurse(near, query, k, heap);
  // Ties at the plane are still visited so lower indices win.
  if (static_cast<Index>(heap.size()) < k || diff * diff <= heap.front().dist2)
    knn_recurse(far, query, k, heap);
}

void KdTree::radius_search(const double* query, double radius, std::vector<Neighbor>& out) const {
  out.clear();
  if (count_ == 0) return;
  radius_recurse(0, query, radius * radius, out);
}

void KdTree::radius_recurse(Index node_id, const double* query, double r2, std::vector<Neighbor>& out) const {
  const Node& node = nodes_[static_cast<std::size_t>(node_id)];
  if (node.split_dim < 0) {
    for (Index slot = node.begin; slot < node.end; ++slot) {
      const double d2 = dist2_to(query, slot);
      if (d2 <= r2) out.push_back({order_[static_cast<std::size_t>(slot)], d2});
    }
    return;
  }
  const double diff = query[node.split_dim] - node.split;
  const Index near = diff < 0.0 ? node.left : node.right;
  const Index far = diff < 0.0 ? node.right : node.left;
  radius_recurse(near, query, r2, out);
  if (diff * diff <= r2) radius_recurse(far, query, r2, out);
}

}  // namespace det
