// Synthetic function pairs drawn from the generative model, plus a rotated
// slice-pair generator for robustness experiments.
#pragma once

#include "det/core.hpp"

#include <cstdint>
#include <vector>

namespace det {

/// Largest source size for which the dense Gaussian-process draw is allowed.
inline constexpr Index kMaxDenseSynthSize = 5000;

struct SynthConfig {
  Index source_size = 1000;  // M
  Index target_size = 1000;  // N
  Index dim = 2;
  Index feature_dim = 1;
  double omega = 0.1;
  double lambda = 50.0;
  double beta = 0.3;            // kernel width in domain units (domain is the unit cube)
  double noise = 0.01;          // spatial noise std of inlier targets
  double feature_noise = 0.02;  // feature noise std of inlier targets
  int bumps = 2;                // Gaussian bumps per feature
  double bump_width = 0.15;
  double rotation = 0.0;        // radians; about the last axis in 3-D
  double scale = 1.0;
  Vector translation;           // empty means zero
  std::uint64_t seed = 1;
};

struct SynthResult {
  DiscretizedFunction source;
  DiscretizedFunction target;
  std::vector<Index> correspondence;  // per target point, source index or -1 for an outlier
  Matrix displacement;                // planted v, D x M
  SimilarityTransform transform;      // planted T
  Matrix deformed;                    // T(y + v)
};

/// Source on uniform domain points with Gaussian-bump features, v drawn from the
/// motion-coherence prior, targets from the mixture with outlier rate omega.
SynthResult synthesize(const SynthConfig& config);

struct SliceConfig {
  Index source_size = 3000;
  Index target_size = 3000;
  Index feature_dim = 6;
  double warp = 0.15;           // amplitude of the smooth nonrigid warp (domain units)
  double translation_range = 3.0;
  double feature_noise = 0.1;
  std::uint64_t seed = 1;
};

struct SlicePair {
  DiscretizedFunction source;
  DiscretizedFunction target;
  double rotation = 0.0;
  Vector translation;
  /// Ground-truth image of every source point in the target frame.
  Matrix source_in_target;
};

/// Two independent samples of an asymmetric planar tissue shape with regional
/// features; the target is warped, rotated by U(0, 2 pi) and translated.
SlicePair make_slice_pair(const SliceConfig& config);

}  // namespace det
