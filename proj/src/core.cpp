#include "det/core.hpp"

#include <cmath>
#include <iostream>
#include <mutex>
#include <sstream>

namespace det {

namespace {

std::mutex& handler_mutex() {
  static std::mutex m;
  return m;
}

WarningHandler& handler_slot() {
  static WarningHandler h = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return h;
}

void check_range(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("parameter out of range: " + what);
}

void recommend(std::vector<std::string>& out, const char* name, double value, double lo, double hi) {
  if (value < lo || value > hi) {
    std::ostringstream os;
    os << name << "=" << value << " outside recommended interval [" << lo << ", " << hi << "]";
    out.push_back(os.str());
  }
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(handler_mutex());
  WarningHandler previous = std::move(handler_slot());
  handler_slot() = std::move(handler);
  return previous;
}

void warn(const std::string& message) {
  WarningHandler h;
  {
    std::lock_guard lock(handler_mutex());
    h = handler_slot();
  }
  if (h) h(message);
}

WarningCapture::WarningCapture() {
  previous_ = set_warning_handler([this](const std::string& msg) { messages_.push_back(msg); });
}

WarningCapture::~WarningCapture() { set_warning_handler(std::move(previous_)); }

bool WarningCapture::contains(const std::string& needle) const {
  for (const auto& m : messages_)
    if (m.find(needle) != std::string::npos) return true;
  return false;
}

void DiscretizedFunction::validate() const {
  if (points.cols() < 1) throw DegenerateInputError("discretized function has no points");
  if (points.rows() < 1 || points.rows() > 3)
    throw ParameterError("domain dimension must be 1, 2 or 3, got " + std::to_string(points.rows()));
  if (features.rows() < 1) throw ParameterError("feature dimension must be at least 1");
  if (features.cols() != points.cols())
    throw ParameterError("feature columns (" + std::to_string(features.cols()) +
                         ") do not match point count (" + std::to_string(points.cols()) + ")");
  if (!points.allFinite()) throw DegenerateInputError("non-finite point coordinate");
  if (!features.allFinite()) throw DegenerateInputError("non-finite feature value");
}

void HyperParams::validate() const {
  check_range(lambda > 0.0, "lambda > 0");
  check_range(omega >= 0.0 && omega <= 1.0, "omega in [0,1]");
  check_range(gamma > 0.0, "gamma > 0");
  check_range(beta > 0.0, "beta > 0");
  check_range(tau >= 0.0 && tau <= 1.0, "tau in [0,1]");
  check_range(eta >= 0.0 && std::isfinite(eta), "eta >= 0");
  check_range(kappa > 0.0, "kappa > 0");
  if (p_rank) check_range(*p_rank >= 1, "J >= 1");
  if (g_rank) check_range(*g_rank >= 1, "K >= 1");
  if (source_samples) check_range(*source_samples >= 1, "M' >= 1");
  if (target_samples) check_range(*target_samples >= 1, "N' >= 1");
  if (g_rank && source_samples) check_range(*g_rank <= *source_samples, "K <= M'");
  if (p_rank && source_samples && target_samples)
    check_range(*p_rank <= std::min(*source_samples, *target_samples), "J <= min(M', N')");
  check_range(lambda_g >= 0.0, "lambda_g >= 0");
  check_range(epsilon > 0.0, "epsilon > 0");
  if (cell_size) check_range(*cell_size > 0.0, "cell_size > 0");
  if (feature_weight) check_range(*feature_weight >= 0.0, "feature_weight >= 0");
  check_range(knn_k >= 1, "knn_k >= 1");
  check_range(radius_factor > 0.0, "radius_factor > 0");
  check_range(max_iter >= 1, "max_iter >= 1");
  check_range(conv_tol > 0.0, "conv_tol > 0");
}

std::vector<std::string> HyperParams::range_warnings() const {
  std::vector<std::string> out;
  recommend(out, "lambda", lambda, 1.0, 5000.0);
  recommend(out, "omega", omega, 0.0, 0.9);
  recommend(out, "gamma", gamma, 0.1, 3.0);
  recommend(out, "tau", tau, 0.0, 1.0);
  recommend(out, "beta", beta, 0.1, 2.5);
  recommend(out, "eta", eta, 0.5, 2.0);
  if (p_rank) recommend(out, "J", *p_rank, 300, 600);
  if (g_rank) recommend(out, "K", *g_rank, 70, 300);
  if (source_samples) recommend(out, "M'", *source_samples, 2000, 50000);
  if (target_samples) recommend(out, "N'", *target_samples, 2000, 50000);
  return out;
}

SimilarityTransform SimilarityTransform::identity(Index dim) {
  return {1.0, Matrix::Identity(dim, dim), Vector::Zero(dim)};
}

Matrix SimilarityTransform::apply(const Matrix& points) const {
  return ((s * R) * points).colwise() + t;
}

Matrix SimilarityTransform::apply_inverse(const Matrix& points) const {
  return (R.transpose() * (points.colwise() - t)) / s;
}

SimilarityTransform SimilarityTransform::compose(const SimilarityTransform& inner) const {
  return {s * inner.s, R * inner.R, s * (R * inner.t) + t};
}

bool SimilarityTransform::is_proper(double tol) const {
  const Index d = R.rows();
  if ((R.transpose() * R - Matrix::Identity(d, d)).norm() > tol) return false;
  return std::abs(R.determinant() - 1.0) <= tol;
}

Matrix NormalizationRecord::to_target_frame(const Matrix& normalized) const {
  return (normalized * target_scale).colwise() + target_mean;
}

Matrix NormalizationRecord::from_target_frame(const Matrix& original) const {
  return (original.colwise() - target_mean) / target_scale;
}

MomentSummary summarize_domain(const Matrix& points) {
  MomentSummary out;
  out.mean = points.rowwise().mean();
  const Matrix centered = points.colwise() - out.mean;
  out.scale = std::sqrt(centered.squaredNorm() / static_cast<double>(centered.size()));
  return out;
}

double bounding_box_diameter(const Matrix& points) {
  if (points.cols() == 0) return 0.0;
  return (points.rowwise().maxCoeff() - points.rowwise().minCoeff()).norm();
}

NormalizedDomains normalize_domains(const Matrix& target, const Matrix& source, bool pre_aligned) {
  if (target.cols() < 1 || source.cols() < 1) throw DegenerateInputError("empty point set");
  if (target.rows() != source.rows()) throw ParameterError("target and source dimensions differ");
  if (!target.allFinite() || !source.allFinite()) throw DegenerateInputError("non-finite coordinates");

  const MomentSummary tx = summarize_domain(target);
  if (!(tx.scale > 0.0)) throw DegenerateInputError("target points are all identical (zero spread)");
  MomentSummary sy = pre_aligned ? tx : summarize_domain(source);
  if (!(sy.scale > 0.0)) throw DegenerateInputError("source points are all identical (zero spread)");

  NormalizedDomains out;
  out.target = (target.colwise() - tx.mean) / tx.scale;
  out.source = (source.colwise() - sy.mean) / sy.scale;
  out.record = {tx.mean, tx.scale, sy.mean, sy.scale, pre_aligned};
  return out;
}

namespace {

constexpr double kFeatureVarianceFloor = 1e-12;

Matrix standardize_rows(const Matrix& f, const char* which) {
  Matrix out(f.rows(), f.cols());
  for (Index d = 0; d < f.rows(); ++d) {
    const double mean = f.row(d).mean();
    const auto centered = (f.row(d).array() - mean).eval();
    const double var = centered.square().mean();
    if (var < kFeatureVarianceFloor) {
      warn(std::string("constant feature row ") + std::to_string(d) + " in " + which +
           " features; left at zero");
      out.row(d).setZero();
    } else {
      out.row(d) = centered / std::sqrt(var);
    }
  }
  return out;
}

}  // namespace

NormalizedFeatures normalize_features(const Matrix& target_features, const Matrix& source_features) {
  return {standardize_rows(target_features, "target"), standardize_rows(source_features, "source")};
}

double compute_zeta(double eta, Index dim, Index feature_dim) {
  if (eta < 0.0 || dim < 1 || feature_dim < 1) throw ParameterError("compute_zeta: invalid arguments");
  return eta * static_cast<double>(dim) / static_cast<double>(feature_dim);
}

}  // namespace det
