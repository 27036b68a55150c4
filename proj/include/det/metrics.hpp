// Evaluation metrics: voxel Jaccard overlap, neighborhood topology preservation,
// spatially smoothed feature correlation and ground-truth residuals.
#pragma once

#include "det/core.hpp"

#include <optional>
#include <span>
#include <string>

namespace det {

/// |occupied(A) & occupied(B)| / |occupied(A) | occupied(B)| on a lattice of
/// edge `cell_size` anchored at the origin.
double jaccard_index(const Matrix& a, const Matrix& b, double cell_size);

/// Mean fraction of each point's k nearest neighbors in `before` that are still
/// among its k nearest neighbors in `after`.
double topology_score(const Matrix& before, const Matrix& after, int k = 10);

/// Pearson correlation between the registered source features and the target
/// features averaged over the k-neighborhood of each point's nearest target.
/// Empty when either array has zero variance.
std::optional<double> smoothed_pcc(const Matrix& source_features, const Matrix& target_features,
                                   const Matrix& registered_points, const Matrix& target_points, int k = 15);

/// Mean distance between each corresponded target point and its registered source point.
/// correspondence[n] is a source index or -1 for an outlier. Empty when nothing corresponds.
std::optional<double> mean_gt_residual(const Matrix& registered_points, const Matrix& target_points,
                                       std::span<const Index> correspondence);

struct MetricReport {
  std::optional<double> jaccard;
  std::optional<double> topology_score;
  std::optional<double> smoothed_pcc;
  std::optional<double> mean_gt_residual;

  /// One key=value line per metric; absent values are written as NA.
  std::string to_text() const;
};

}  // namespace det
