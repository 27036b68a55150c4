// Variance-guided importance sampling, displacement interpolation, and the
// approximate matching updates (Nystrom early, k-d tree pruning late).
#pragma once

#include "det/core.hpp"
#include "det/inference.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace det {

using CellKey = std::array<std::int64_t, 3>;

/// Voxel partition of a point set with per-cell sampling statistics.
class VoxelGrid {
 public:
  struct Cell {
    std::vector<Index> members;
    double feature_std = 0.0;     // max over dimensions of the in-cell population std
    double boundary_frac = 0.0;   // fraction of empty face neighbors; 0 if all are empty
  };

  /// When `features` is null the feature variability is treated as zero.
  VoxelGrid(const Matrix& points, const Matrix* features, double cell_size);

  double cell_size() const { return cell_size_; }
  Index dim() const { return dim_; }
  const std::map<CellKey, Cell>& cells() const { return cells_; }
  CellKey key_of(const Eigen::Ref<const Vector>& point) const;
  const Cell& cell_of_point(Index i) const;

 private:
  double cell_size_;
  Index dim_;
  std::map<CellKey, Cell> cells_;
  std::vector<const Cell*> point_cell_;
};

struct SampleSet {
  std::vector<Index> indices;  // ascending, unique
  Vector weights;              // sampling probability of each selected point
};

/// Per-point probabilities proportional to max(sigma_f, lambda_g * sigma_g) + epsilon.
Vector vgis_probabilities(const VoxelGrid& grid, Index count, double lambda_g, double epsilon);

/// Weighted sampling without replacement. Returns every point (with a warning)
/// when target_count exceeds the set size. Pass features == nullptr to ignore them.
SampleSet vgis_sample(const Matrix& points, const Matrix* features, Index target_count, double lambda_g,
                      double epsilon, double cell_size, std::uint64_t seed);

/// Default voxel edge: bounding-box diameter / 50.
double default_cell_size(const Matrix& points);

/// Gaussian-process posterior mean of the displacement field at `full_points`
/// given displacements at `sampled_points`. When `sampled_indices` maps sample j
/// to full index i, that point receives the sampled value directly.
Matrix interpolate_displacement(const Matrix& full_points, const Matrix& sampled_points,
                                const Matrix& sampled_displacement, double beta,
                                std::optional<std::span<const Index>> sampled_indices = std::nullopt);

/// Low-rank approximation of the unnormalized likelihood with `landmarks` points
/// drawn uniformly without replacement from the smaller of the two point sets.
MatchingStats nystrom_matching(const InferenceState& state, const DiscretizedFunction& target,
                               const DiscretizedFunction& source, const HyperParams& params,
                               const ModelTerms& terms, int landmarks, std::uint64_t seed);

/// Exact entries restricted to source points within radius_factor * sigma of each target point.
MatchingStats kdtree_matching(const InferenceState& state, const DiscretizedFunction& target,
                              const DiscretizedFunction& source, const HyperParams& params,
                              const ModelTerms& terms, double radius_factor, bool keep_dense = false);

}  // namespace det
