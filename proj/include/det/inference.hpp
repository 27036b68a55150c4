// Variational inference engine: mixture likelihood with an adaptive outlier
// law, the matching / displacement / global-alignment updates, and the loop.
#pragma once

#include "det/core.hpp"
#include "det/kernel.hpp"

#include <cstdint>
#include <functional>
#include <optional>

namespace det {

inline constexpr double kSigma2Floor = 1e-12;
inline constexpr double kPiFloor = 1e-9;
inline constexpr double kCollapseThreshold = 1e-8;
/// Above this feature dimension the outlier law switches from a bounding box to Gaussian marginals.
inline constexpr Index kOutlierBoxMaxFeatureDim = 10;

/// Target-side statistics for the outlier density.
struct TargetStats {
  double spatial_volume = 0.0;
  double feature_volume = 0.0;  // bounding-box volume of the features (may be 0)
  Vector feature_mean;
  Vector feature_var;
  Index feature_dim = 0;

  /// Throws DegenerateInputError if the spatial bounding box has zero volume.
  static TargetStats compute(const DiscretizedFunction& target);
};

/// log p_out for a target point with feature vector `f`.
/// D' <= 10: -log V_X - zeta log V_f.  Otherwise -log V_X + zeta * sum_d log N(f_d; mean_d, var_d).
double outlier_log_density(const Eigen::Ref<const Vector>& f, const TargetStats& stats, double zeta);
double outlier_density(const Eigen::Ref<const Vector>& f, const TargetStats& stats, double zeta);

/// Quantities fixed for the duration of one run.
struct ModelTerms {
  double zeta = 0.0;
  TargetStats stats;
  Vector log_outlier;  // log(omega * p_out(n)); -inf when omega == 0
};

ModelTerms make_model_terms(const DiscretizedFunction& target, const DiscretizedFunction& source,
                            const HyperParams& params);

/// Sufficient statistics of the matching probability matrix P (M x N).
struct MatchingStats {
  Vector nu;        // M, row sums
  Vector nu_prime;  // N, column sums
  double n_hat = 0.0;
  Matrix px;        // D x M, column m = sum_n p_mn x_n
  Matrix pfx;       // D' x M, column m = sum_n p_mn f_X(x_n)
  double x_sq = 0.0;  // sum_n nu'_n |x_n|^2
  Vector fx_sq;       // D', sum_n nu'_n f_n(d)^2

  // ELBO pieces; only meaningful when `exact`.
  double assignment_entropy = 0.0;
  double outlier_energy = 0.0;
  bool exact = false;

  std::size_t underflow_columns = 0;
  std::size_t feature_evaluations = 0;
  std::optional<Matrix> dense;  // full P when requested
};

struct InferenceState {
  SimilarityTransform transform;
  Matrix v_hat;       // D x M
  Vector sigma_diag;  // M, diagonal of the displacement posterior covariance
  Vector alpha;       // M, <alpha_m>
  double sigma2 = 1.0;
  Vector pi_diag;     // D', per-feature noise variances
  MatchingStats matching;
  Matrix y_hat;       // D x M
  std::optional<double> kl_displacement;  // KL(q_v || prior) from the last displacement update

  Vector alpha_log() const { return alpha.array().log(); }
};

struct StepOptions {
  bool pin_displacement = false;  // v = 0 (rigid / similarity only)
  bool pin_scale = false;         // s = 1
  bool track_elbo = false;
};

/// Non-informative start: v = 0, s = 1, R = I, t = 0, Sigma = I, <alpha> = 1/M,
/// sigma^2 and Pi from the gamma-scaled mean squared residuals.
InferenceState initialize(const DiscretizedFunction& target, const DiscretizedFunction& source,
                          const HyperParams& params);

/// Exact matching statistics over all (m, n) pairs, evaluated in the log domain.
MatchingStats dense_matching(const InferenceState& state, const DiscretizedFunction& target,
                             const DiscretizedFunction& source, const HyperParams& params, const ModelTerms& terms,
                             bool keep_dense = false);

void update_matching(InferenceState& state, const DiscretizedFunction& target, const DiscretizedFunction& source,
                     const HyperParams& params, const ModelTerms& terms, bool keep_dense = false);

/// Gaussian posterior of the displacement field (low-rank Woodbury form) and
/// the Dirichlet expectation of the mixing weights.
void update_displacement(InferenceState& state, const DiscretizedFunction& source, const CoherenceKernel& kernel,
                         const HyperParams& params, const StepOptions& options = {});

/// Closed-form similarity transform, sigma^2 and diagonal Pi.
void update_global(InferenceState& state, const DiscretizedFunction& target, const DiscretizedFunction& source,
                   const HyperParams& params, const StepOptions& options = {});

/// R = Phi diag(1, ..., 1, det(Phi Psi^T)) Psi^T from the SVD of `cross_covariance`.
Matrix proper_rotation(const Matrix& cross_covariance);

/// Variational lower bound after a full cycle. Defined only when the matching
/// statistics are exact, kappa is infinite and the displacement KL is known.
std::optional<double> evaluate_elbo(const InferenceState& state, const DiscretizedFunction& target,
                                    const DiscretizedFunction& source, const HyperParams& params,
                                    const ModelTerms& terms);

struct RunOptions {
  bool pin_displacement = false;
  bool pin_scale = false;
  std::uint64_t seed = 20240531;
  bool track_elbo = true;
  std::function<void(const IterationRecord&, const InferenceState&)> observer;
};

/// Iterates matching -> displacement -> global updates until the relative change
/// of sigma^2 drops below params.conv_tol or params.max_iter is reached.
/// Inputs are expected in normalized coordinates; `kernel` is built on source.points.
RegistrationResult run_det(const DiscretizedFunction& target, const DiscretizedFunction& source,
                           const HyperParams& params, const CoherenceKernel& kernel, const RunOptions& options = {});

}  // namespace det
