// Static k-d tree over the columns of a point matrix.
#pragma once

#include "det/core.hpp"

#include <vector>

namespace det {

struct Neighbor {
  Index index;
  double dist2;
};

/// Orders neighbors by distance, then by lower index.
inline bool closer(const Neighbor& a, const Neighbor& b) {
  return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

class KdTree {
 public:
  explicit KdTree(const Matrix& points, int leaf_size = 16);

  Index size() const { return count_; }
  Index dim() const { return dim_; }

  /// The k nearest points to `query` (length dim()), sorted by `closer`.
  /// Returns all points when k >= size().
  std::vector<Neighbor> knn(const double* query, Index k) const;

  /// All points with squared distance <= radius^2, in unspecified order.
  void radius_search(const double* query, double radius, std::vector<Neighbor>& out) const;

 private:
  struct Node {
    Index begin = 0;
    Index end = 0;
    int split_dim = -1;  // -1 marks a leaf
    double split = 0.0;
    Index left = -1;
    Index right = -1;
  };

  Index build(Index begin, Index end);
  double dist2_to(const double* query, Index slot) const;
  void knn_recurse(Index node, const double* query, Index k, std::vector<Neighbor>& heap) const;
  void radius_recurse(Index node, const double* query, double r2, std::vector<Neighbor>& out) const;

  Index dim_ = 0;
  Index count_ = 0;
  int leaf_size_ = 16;
  std::vector<double> coords_;  // row-major copy, permuted to tree order
  std::vector<Index> order_;    // tree slot -> original index
  std::vector<Node> nodes_;
};

}  // namespace det
