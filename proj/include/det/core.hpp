// Shared domain types, input normalization and likelihood balancing.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace det {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs that cannot be registered (zero spread, zero-volume boxes, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A parameter outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown during inference.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// The displacement posterior system could not be factorized.
class StiffnessError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Every target point was classified as an outlier.
class CollapseError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Warnings go to a process-wide handler (stderr by default).
using WarningHandler = std::function<void(const std::string&)>;

WarningHandler set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

/// Collects warnings emitted while alive; restores the previous handler on exit.
class WarningCapture {
 public:
  WarningCapture();
  ~WarningCapture();
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(const std::string& needle) const;

 private:
  std::vector<std::string> messages_;
  WarningHandler previous_;
};

/// A function sampled on an irregular point set: column n of `features`
/// holds the function value at column n of `points`.
struct DiscretizedFunction {
  Matrix points;    // D x N
  Matrix features;  // D' x N

  Index size() const { return points.cols(); }
  Index dim() const { return points.rows(); }
  Index feature_dim() const { return features.rows(); }

  /// Throws DegenerateInputError / ParameterError on shape or finiteness violations.
  void validate() const;
};

/// Tuning parameters of a single registration run.
struct HyperParams {
  double lambda = 2.0;   // deformation stiffness
  double omega = 0.1;    // outlier probability
  double gamma = 1.0;    // initialization looseness
  double beta = 1.0;     // coherence kernel width
  double tau = 0.0;      // geodesic mixing rate
  double eta = 1.0;      // functional confidence; 0 switches the feature term off
  double kappa = kInfinity;  // Dirichlet concentration

  // Acceleration. Unset means exact computation.
  std::optional<int> p_rank;          // Nystrom landmarks for the matching matrix
  std::optional<int> g_rank;          // rank of the coherence matrix
  std::optional<int> source_samples;  // downsampled source size
  std::optional<int> target_samples;  // downsampled target size

  double lambda_g = 1.0;                 // VGIS geometric weight
  double epsilon = 0.01;                 // VGIS base density
  std::optional<double> cell_size;       // VGIS voxel edge; default diameter / 50
  int knn_k = 15;                        // geodesic graph degree
  std::optional<double> feature_weight;  // augmented-graph feature scale
  double radius_factor = 5.0;            // k-d tree pruning radius in units of sigma
  int max_iter = 1000;
  double conv_tol = 1e-5;

  void validate() const;
  /// Messages for values outside the recommended tuning intervals.
  std::vector<std::string> range_warnings() const;
};

/// T(z) = s R z + t with a proper rotation R.
struct SimilarityTransform {
  double s = 1.0;
  Matrix R;
  Vector t;

  static SimilarityTransform identity(Index dim);

  Index dim() const { return R.rows(); }
  Matrix apply(const Matrix& points) const;
  Matrix apply_inverse(const Matrix& points) const;
  /// (this o inner)(z) = this(inner(z)).
  SimilarityTransform compose(const SimilarityTransform& inner) const;
  bool is_proper(double tol = 1e-10) const;
};

/// One line of the per-iteration log.
struct IterationRecord {
  int iteration = 0;
  double sigma2 = 0.0;
  double n_hat = 0.0;
  std::optional<double> elbo;
  double wall_ms = 0.0;
  bool accelerated = false;
};

struct RegistrationResult {
  Matrix deformed_domain;  // D x M
  Matrix displacement;     // D x M
  SimilarityTransform transform;
  Vector nonoutlier_prob;  // N
  double sigma2 = 0.0;
  Vector pi_diag;          // D'
  double matched_count = 0.0;
  int iterations = 0;
  bool converged = false;
  std::size_t underflow_columns = 0;
  std::vector<IterationRecord> diagnostics;
  Vector displacement_var;  // M, posterior variance of v_m per coordinate
  Vector mixing_weights;    // M, <alpha_m>
};

/// Statistics needed to map normalized coordinates back to the inputs.
struct NormalizationRecord {
  Vector target_mean;
  double target_scale = 1.0;
  Vector source_mean;
  double source_scale = 1.0;
  bool pre_aligned = false;

  /// Normalized coordinates to the original target frame.
  Matrix to_target_frame(const Matrix& normalized) const;
  Matrix from_target_frame(const Matrix& original) const;
};

struct NormalizedDomains {
  Matrix target;
  Matrix source;
  NormalizationRecord record;
};

/// Centers each domain and divides by the scalar standard deviation of all
/// centered coordinates. With `pre_aligned` the source uses the target's statistics.
NormalizedDomains normalize_domains(const Matrix& target, const Matrix& source, bool pre_aligned);

struct NormalizedFeatures {
  Matrix target;
  Matrix source;
};

/// Row-wise standardization of each feature matrix independently.
/// Constant rows are centered and left at zero.
NormalizedFeatures normalize_features(const Matrix& target_features, const Matrix& source_features);

/// Exponent that balances the functional likelihood against the spatial one.
double compute_zeta(double eta, Index dim, Index feature_dim);

/// Population mean and scalar standard deviation over all entries of centered rows.
struct MomentSummary {
  Vector mean;
  double scale = 0.0;
};
MomentSummary summarize_domain(const Matrix& points);

/// Length of the bounding-box diagonal.
double bounding_box_diameter(const Matrix& points);

}  // namespace det
