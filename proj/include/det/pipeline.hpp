// Hierarchical (coarse-to-fine) registration with functional annealing.
#pragma once

#include "det/core.hpp"
#include "det/inference.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace det {

/// Stiffness used to realize similarity-only stages.
inline constexpr double kRigidStiffness = 1e8;

enum class StageMode { rigid, nonrigid };

struct Stage {
  HyperParams params;
  StageMode mode = StageMode::nonrigid;
  bool pin_displacement = false;  // hard rigid: v fixed at zero

  /// Parameters actually passed to the engine (rigid stages get kRigidStiffness).
  HyperParams effective_params() const;
};

struct StageSchedule {
  std::vector<Stage> stages;

  /// At least one stage; beta and eta non-increasing across stages; each stage valid.
  void validate() const;
};

enum class SchedulePreset { rigid_then_fine, fine_only };

StageSchedule default_schedule(SchedulePreset preset);

struct StageDiagnostics {
  int stage = 0;
  StageMode mode = StageMode::nonrigid;
  Index source_samples = 0;
  Index target_samples = 0;
  int iterations = 0;
  bool converged = false;
  double sigma2 = 0.0;
  double matched_count = 0.0;
  SimilarityTransform transform;  // stage transform in original coordinates
  std::vector<IterationRecord> log;
  std::vector<std::string> warnings;
};

struct HierarchicalResult {
  /// Deformed domain, transform and displacement in the original target frame:
  /// deformed = transform.apply(source + displacement).
  RegistrationResult result;
  /// Final deformed domain minus the original source points.
  Matrix total_displacement;
  /// Normalization of the last stage (maps the target frame to normalized units).
  NormalizationRecord normalization;
  std::vector<StageDiagnostics> stages;
};

/// Raised when a stage fails; carries the diagnostics of completed stages.
class StageError : public Error {
 public:
  StageError(int stage, const std::string& what, std::vector<StageDiagnostics> completed, bool numerical);
  int stage() const { return stage_; }
  bool numerical() const { return numerical_; }
  const std::vector<StageDiagnostics>& completed() const { return completed_; }

 private:
  int stage_;
  bool numerical_;
  std::vector<StageDiagnostics> completed_;
};

struct PipelineOptions {
  /// Treat the raw source as already aligned with the target in the first stage.
  bool pre_aligned = false;
};

/// Runs each stage as downsample -> register -> interpolate, feeding the
/// full-resolution output of stage l into stage l + 1.
HierarchicalResult hierarchical_register(const DiscretizedFunction& target, const DiscretizedFunction& source,
                                         const StageSchedule& schedule, std::uint64_t seed,
                                         const PipelineOptions& options = {});

}  // namespace det
