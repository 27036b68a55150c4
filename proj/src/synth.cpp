#include "det/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace det {

namespace {

Matrix rotation_matrix(Index dim, double angle) {
  Matrix r = Matrix::Identity(dim, dim);
  if (dim >= 2) {
    const double c = std::cos(angle), s = std::sin(angle);
    r(0, 0) = c;
    r(0, 1) = -s;
    r(1, 0) = s;
    r(1, 1) = c;
  }
  return r;
}

Matrix bump_features(const Matrix& points, const std::vector<Matrix>& centers, double width) {
  Matrix f = Matrix::Zero(static_cast<Index>(centers.size()), points.cols());
  const double inv = 0.5 / (width * width);
  for (std::size_t d = 0; d < centers.size(); ++d)
    for (Index i = 0; i < points.cols(); ++i)
      for (Index c = 0; c < centers[d].cols(); ++c)
        f(static_cast<Index>(d), i) += std::exp(-(points.col(i) - centers[d].col(c)).squaredNorm() * inv);
  return f;
}

// Dense draw from N(0, G / lambda) per coordinate using G = U diag(l) U^T.
Matrix gp_draw(const Matrix& points, double beta, double lambda, Index dim, std::mt19937_64& rng) {
  const Index m = points.cols();
  Matrix g(m, m);
  const double inv = 0.5 / (beta * beta);
  for (Index a = 0; a < m; ++a)
    for (Index b = a; b < m; ++b) g(a, b) = g(b, a) = std::exp(-(points.col(a) - points.col(b)).squaredNorm() * inv);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g);
  if (eig.info() != Eigen::Success) throw NumericalError("kernel eigendecomposition failed during synthesis");
  const Matrix factor = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::normal_distribution<double> normal;
  Matrix z(m, dim);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  return (factor * z).transpose() / std::sqrt(lambda);
}

}  // namespace

SynthResult synthesize(const SynthConfig& cfg) {
  if (cfg.source_size < 1 || cfg.target_size < 1) throw ParameterError("synth sizes must be positive");
  if (cfg.source_size > kMaxDenseSynthSize || cfg.target_size > kMaxDenseSynthSize)
    throw ParameterError("synth size exceeds " + std::to_string(kMaxDenseSynthSize) +
                         " (dense Gaussian-process sampling); choose a smaller size");
  if (cfg.dim < 1 || cfg.dim > 3) throw ParameterError("synth dimension must be 1, 2 or 3");
  if (cfg.feature_dim < 1) throw ParameterError("synth feature dimension must be at least 1");
  if (!(cfg.omega >= 0.0 && cfg.omega <= 1.0)) throw ParameterError("omega must lie in [0, 1]");
  if (!(cfg.lambda > 0.0) || !(cfg.beta > 0.0)) throw ParameterError("lambda and beta must be positive");
  if (cfg.bumps < 1 || !(cfg.bump_width > 0.0)) throw ParameterError("bump count and width must be positive");
  if (cfg.translation.size() != 0 && cfg.translation.size() != cfg.dim)
    throw ParameterError("translation length must equal the dimension");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;
  const Index m = cfg.source_size, n = cfg.target_size, dim = cfg.dim;

  SynthResult out;
  out.source.points.resize(dim, m);
  for (Index i = 0; i < out.source.points.size(); ++i) out.source.points.data()[i] = unit(rng);
  std::vector<Matrix> centers(static_cast<std::size_t>(cfg.feature_dim));
  for (auto& c : centers) {
    c.resize(dim, cfg.bumps);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = 0.15 + 0.7 * unit(rng);
  }
  out.source.features = bump_features(out.source.points, centers, cfg.bump_width);

  out.displacement = gp_draw(out.source.points, cfg.beta, cfg.lambda, dim, rng);
  out.transform.s = cfg.scale;
  out.transform.R = rotation_matrix(dim, cfg.rotation);
  out.transform.t = cfg.translation.size() ? cfg.translation : Vector::Zero(dim);
  out.deformed = out.transform.apply(out.source.points + out.displacement);

  const Vector lo = out.deformed.rowwise().minCoeff(), hi = out.deformed.rowwise().maxCoeff();
  const Vector flo = out.source.features.rowwise().minCoeff(), fhi = out.source.features.rowwise().maxCoeff();
  std::uniform_int_distribution<Index> pick(0, m - 1);
  out.target.points.resize(dim, n);
  out.target.features.resize(cfg.feature_dim, n);
  out.correspondence.resize(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    if (unit(rng) < cfg.omega) {
      for (Index d = 0; d < dim; ++d) out.target.points(d, j) = lo(d) + (hi(d) - lo(d)) * unit(rng);
      for (Index d = 0; d < cfg.feature_dim; ++d) out.target.features(d, j) = flo(d) + (fhi(d) - flo(d)) * unit(rng);
      out.correspondence[static_cast<std::size_t>(j)] = -1;
    } else {
      const Index src = pick(rng);
      for (Index d = 0; d < dim; ++d) out.target.points(d, j) = out.deformed(d, src) + cfg.noise * normal(rng);
      for (Index d = 0; d < cfg.feature_dim; ++d)
        out.target.features(d, j) = out.source.features(d, src) + cfg.feature_noise * normal(rng);
      out.correspondence[static_cast<std::size_t>(j)] = src;
    }
  }
  return out;
}

namespace {

// A curved band (like a hemisphere section) with a rounded bulge at one end.
bool inside_slice(double x, double y) {
  const double r = std::hypot(x, y);
  const double angle = std::atan2(y, x);
  const bool band = r > 1.2 && r < 2.0 && (angle > -0.35 || angle < -2.8);
  const bool bulge = (x - 1.75) * (x - 1.75) + (y + 0.75) * (y + 0.75) < 0.36;
  return band || bulge;
}

Matrix sample_slice(Index count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(-2.0, 2.4), uy(-1.4, 2.0);
  Matrix pts(2, count);
  for (Index i = 0; i < count;) {
    const double x = ux(rng), y = uy(rng);
    if (!inside_slice(x, y)) continue;
    pts(0, i) = x;
    pts(1, i) = y;
    ++i;
  }
  return pts;
}

}  // namespace

SlicePair make_slice_pair(const SliceConfig& cfg) {
  if (cfg.source_size < 1 || cfg.target_size < 1 || cfg.feature_dim < 1)
    throw ParameterError("slice sizes must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;

  // Regional features: each one a broad bump centered on a point of the shape.
  const Matrix anchor_pool = sample_slice(cfg.feature_dim, rng);
  std::vector<Matrix> centers;
  for (Index d = 0; d < cfg.feature_dim; ++d) centers.push_back(anchor_pool.col(d));
  const double phase_x = 2.0 * std::numbers::pi * unit(rng), phase_y = 2.0 * std::numbers::pi * unit(rng);
  auto warp = [&](const Matrix& p) {
    Matrix v(2, p.cols());
    for (Index i = 0; i < p.cols(); ++i) {
      v(0, i) = cfg.warp * std::sin(0.8 * p(1, i) + phase_x);
      v(1, i) = cfg.warp * std::cos(0.7 * p(0, i) + phase_y);
    }
    return v;
  };

  SlicePair out;
  out.rotation = 2.0 * std::numbers::pi * unit(rng);
  out.translation = Vector(2);
  for (Index d = 0; d < 2; ++d) out.translation(d) = cfg.translation_range * (2.0 * unit(rng) - 1.0);
  SimilarityTransform pose;
  pose.s = 1.0;
  pose.R = rotation_matrix(2, out.rotation);
  pose.t = out.translation;

  out.source.points = sample_slice(cfg.source_size, rng);
  out.source.features = bump_features(out.source.points, centers, 0.6);
  const Matrix q = sample_slice(cfg.target_size, rng);
  out.target.features = bump_features(q, centers, 0.6);
  out.target.points = pose.apply(q + warp(q));
  for (Index i = 0; i < out.source.features.size(); ++i) out.source.features.data()[i] += cfg.feature_noise * normal(rng);
  for (Index i = 0; i < out.target.features.size(); ++i) out.target.features.data()[i] += cfg.feature_noise * normal(rng);
  out.source_in_target = pose.apply(out.source.points + warp(out.source.points));
  return out;
}

}  // namespace det
