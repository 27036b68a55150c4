// Step (a): matching probabilities. Dense, k-d tree pruned and Nystrom variants
// share the same per-column log-domain normalization.
#include "det/inference.hpp"
#include "det/kdtree.hpp"
#include "det/sampling.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace det {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr Index kColumnBlock = 128;
// Feature dimension above which pairwise feature distances go through a matrix product.
constexpr Index kDirectFeatureLimit = 16;

struct LikelihoodSetup {
  double log_norm = 0.0;  // log(1-omega) + Gaussian normalizers
  Vector row_log;         // log <alpha_m> + log b_m
  Vector inv_pi;          // 1 / pi_d^2
  double inv_two_sigma2 = 0.0;
  double zeta = 0.0;
  bool use_features = false;
};

LikelihoodSetup make_setup(const InferenceState& state, Index dim, const HyperParams& params,
                           const ModelTerms& terms) {
  LikelihoodSetup s;
  s.zeta = terms.zeta;
  s.use_features = terms.zeta > 0.0;
  s.inv_two_sigma2 = 0.5 / state.sigma2;
  s.log_norm = params.omega >= 1.0 ? -kInfinity
                                   : std::log1p(-params.omega) - 0.5 * static_cast<double>(dim) *
                                                                      std::log(kTwoPi * state.sigma2);
  if (s.use_features) {
    s.inv_pi = state.pi_diag.cwiseInverse();
    s.log_norm -= 0.5 * s.zeta * (kTwoPi * state.pi_diag.array()).log().sum();
  }
  const double scale2 = state.transform.s * state.transform.s;
  s.row_log = state.alpha.array().log() -
              (scale2 * s.inv_two_sigma2 * static_cast<double>(dim)) * state.sigma_diag.array();
  return s;
}

MatchingStats empty_stats(Index m, Index n, Index dim, Index fdim) {
  MatchingStats st;
  st.nu = Vector::Zero(m);
  st.nu_prime = Vector::Zero(n);
  st.px = Matrix::Zero(dim, m);
  st.pfx = Matrix::Zero(fdim, m);
  st.fx_sq = Vector::Zero(fdim);
  return st;
}

// Turns log numerators into probabilities in place; returns the column sum.
// Updates the ELBO pieces of `st`.
double normalize_column(double* lv, Index count, double log_out, MatchingStats& st, bool& underflow) {
  double mx = log_out;
  for (Index i = 0; i < count; ++i) mx = std::max(mx, lv[i]);
  if (mx == -kInfinity) {
    underflow = true;
    std::fill(lv, lv + count, 0.0);
    return 0.0;
  }
  underflow = false;
  double sum = log_out == -kInfinity ? 0.0 : std::exp(log_out - mx);
  for (Index i = 0; i < count; ++i) sum += std::exp(lv[i] - mx);
  const double log_den = mx + std::log(sum);

  double total = 0.0;
  double entropy = 0.0;
  for (Index i = 0; i < count; ++i) {
    const double lp = lv[i] - log_den;
    const double p = std::exp(lp);
    if (p > 0.0) entropy -= p * lp;
    lv[i] = p;
    total += p;
  }
  if (log_out != -kInfinity) {
    const double lq = log_out - log_den;
    const double q = std::exp(lq);
    if (q > 0.0) {
      entropy -= q * lq;
      st.outlier_energy += q * log_out;
    }
  }
  st.assignment_entropy += entropy;
  return total;
}

void finish_totals(MatchingStats& st, const DiscretizedFunction& target) {
  st.n_hat = st.nu.sum();
  st.x_sq = (target.points.colwise().squaredNorm().transpose().array() * st.nu_prime.array()).sum();
  st.fx_sq = target.features.array().square().matrix() * st.nu_prime;
}

}  // namespace

TargetStats TargetStats::compute(const DiscretizedFunction& target) {
  TargetStats st;
  const Vector extent = target.points.rowwise().maxCoeff() - target.points.rowwise().minCoeff();
  st.spatial_volume = extent.prod();
  if (!(st.spatial_volume > 0.0))
    throw DegenerateInputError("target bounding box has zero spatial volume");
  const Vector fextent = target.features.rowwise().maxCoeff() - target.features.rowwise().minCoeff();
  st.feature_volume = fextent.prod();
  st.feature_dim = target.features.rows();
  st.feature_mean = target.features.rowwise().mean();
  st.feature_var = (target.features.colwise() - st.feature_mean).array().square().rowwise().mean();
  st.feature_var = st.feature_var.cwiseMax(1e-12);
  return st;
}

double outlier_log_density(const Eigen::Ref<const Vector>& f, const TargetStats& stats, double zeta) {
  double lp = -std::log(stats.spatial_volume);
  if (zeta == 0.0) return lp;
  if (stats.feature_dim <= kOutlierBoxMaxFeatureDim) {
    if (!(stats.feature_volume > 0.0))
      throw DegenerateInputError("target feature bounding box has zero volume");
    return lp - zeta * std::log(stats.feature_volume);
  }
  double lg = 0.0;
  for (Index d = 0; d < stats.feature_dim; ++d) {
    const double diff = f(d) - stats.feature_mean(d);
    lg -= 0.5 * (std::log(kTwoPi * stats.feature_var(d)) + diff * diff / stats.feature_var(d));
  }
  return lp + zeta * lg;
}

double outlier_density(const Eigen::Ref<const Vector>& f, const TargetStats& stats, double zeta) {
  return std::exp(outlier_log_density(f, stats, zeta));
}

ModelTerms make_model_terms(const DiscretizedFunction& target, const DiscretizedFunction& source,
                            const HyperParams& params) {
  target.validate();
  source.validate();
  if (target.dim() != source.dim()) throw ParameterError("target and source domain dimensions differ");
  if (target.feature_dim() != source.feature_dim()) throw ParameterError("target and source feature dimensions differ");
  ModelTerms terms;
  terms.zeta = compute_zeta(params.eta, target.dim(), target.feature_dim());
  terms.log_outlier = Vector::Constant(target.size(), -kInfinity);
  if (params.omega > 0.0) {
    terms.stats = TargetStats::compute(target);
    const double log_omega = std::log(params.omega);
    for (Index n = 0; n < target.size(); ++n)
      terms.log_outlier(n) = log_omega + outlier_log_density(target.features.col(n), terms.stats, terms.zeta);
  }
  return terms;
}

MatchingStats dense_matching(const InferenceState& state, const DiscretizedFunction& target,
                             const DiscretizedFunction& source, const HyperParams& params, const ModelTerms& terms,
                             bool keep_dense) {
  const Index m = source.size(), n = target.size(), dim = target.dim(), fdim = target.feature_dim();
  const LikelihoodSetup setup = make_setup(state, dim, params, terms);
  MatchingStats st = empty_stats(m, n, dim, fdim);
  st.exact = true;
  if (keep_dense) st.dense = Matrix::Zero(m, n);

  const bool gemm_features = setup.use_features && fdim > kDirectFeatureLimit;
  Matrix scaled_src;
  Vector src_norm;
  if (gemm_features) {
    scaled_src = setup.inv_pi.cwiseSqrt().asDiagonal() * source.features;
    src_norm = scaled_src.colwise().squaredNorm().transpose();
  }

  Matrix block(m, kColumnBlock);
  for (Index start = 0; start < n; start += kColumnBlock) {
    const Index width = std::min(kColumnBlock, n - start);
    auto lv = block.leftCols(width);

    for (Index j = 0; j < width; ++j) {
      const auto xn = target.points.col(start + j);
      for (Index i = 0; i < m; ++i)
        lv(i, j) = setup.row_log(i) - (state.y_hat.col(i) - xn).squaredNorm() * setup.inv_two_sigma2;
    }
    if (setup.use_features) {
      st.feature_evaluations += static_cast<std::size_t>(m * width);
      const double half_zeta = 0.5 * setup.zeta;
      if (gemm_features) {
        const Matrix scaled_tgt =
            setup.inv_pi.cwiseSqrt().asDiagonal() * target.features.middleCols(start, width);
        const Vector tgt_norm = scaled_tgt.colwise().squaredNorm().transpose();
        Matrix fd2 = (scaled_src.transpose() * scaled_tgt * -2.0).colwise() + src_norm;
        fd2.rowwise() += tgt_norm.transpose();
        lv -= half_zeta * fd2.cwiseMax(0.0);
      } else {
        for (Index j = 0; j < width; ++j) {
          const auto fn = target.features.col(start + j);
          for (Index i = 0; i < m; ++i) {
            double acc = 0.0;
            for (Index d = 0; d < fdim; ++d) {
              const double diff = fn(d) - source.features(d, i);
              acc += diff * diff * setup.inv_pi(d);
            }
            lv(i, j) -= half_zeta * acc;
          }
        }
      }
    }
    lv.array() += setup.log_norm;

    for (Index j = 0; j < width; ++j) {
      bool underflow = false;
      st.nu_prime(start + j) = normalize_column(lv.col(j).data(), m, terms.log_outlier(start + j), st, underflow);
      if (underflow) ++st.underflow_columns;
    }
    st.nu += lv.rowwise().sum();
    st.px.noalias() += target.points.middleCols(start, width) * lv.transpose();
    st.pfx.noalias() += target.features.middleCols(start, width) * lv.transpose();
    if (keep_dense) st.dense->middleCols(start, width) = lv;
  }
  finish_totals(st, target);
  return st;
}

void update_matching(InferenceState& state, const DiscretizedFunction& target, const DiscretizedFunction& source,
                     const HyperParams& params, const ModelTerms& terms, bool keep_dense) {
  state.matching = dense_matching(state, target, source, params, terms, keep_dense);
}

MatchingStats kdtree_matching(const InferenceState& state, const DiscretizedFunction& target,
                              const DiscretizedFunction& source, const HyperParams& params,
                              const ModelTerms& terms, double radius_factor, bool keep_dense) {
  if (std::isinf(radius_factor)) return dense_matching(state, target, source, params, terms, keep_dense);

  const Index m = source.size(), n = target.size(), dim = target.dim(), fdim = target.feature_dim();
  const LikelihoodSetup setup = make_setup(state, dim, params, terms);
  MatchingStats st = empty_stats(m, n, dim, fdim);
  if (keep_dense) st.dense = Matrix::Zero(m, n);

  const KdTree tree(state.y_hat);
  const double radius = radius_factor * std::sqrt(state.sigma2);
  std::vector<Neighbor> hits;
  std::vector<double> lv;
  const double half_zeta = 0.5 * setup.zeta;
  for (Index j = 0; j < n; ++j) {
    const auto xn = target.points.col(j);
    tree.radius_search(xn.data(), radius, hits);
    if (hits.empty()) {
      ++st.underflow_columns;
      continue;
    }
    std::sort(hits.begin(), hits.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    lv.resize(hits.size());
    for (std::size_t h = 0; h < hits.size(); ++h) {
      const Index i = hits[h].index;
      double value = setup.row_log(i) - hits[h].dist2 * setup.inv_two_sigma2 + setup.log_norm;
      if (setup.use_features) {
        double acc = 0.0;
        for (Index d = 0; d < fdim; ++d) {
          const double diff = target.features(d, j) - source.features(d, i);
          acc += diff * diff * setup.inv_pi(d);
        }
        value -= half_zeta * acc;
      }
      lv[h] = value;
    }
    if (setup.use_features) st.feature_evaluations += hits.size();

    bool underflow = false;
    st.nu_prime(j) = normalize_column(lv.data(), static_cast<Index>(lv.size()), terms.log_outlier(j), st, underflow);
    if (underflow) {
      ++st.underflow_columns;
      continue;
    }
    for (std::size_t h = 0; h < hits.size(); ++h) {
      const double p = lv[h];
      if (p == 0.0) continue;
      const Index i = hits[h].index;
      st.nu(i) += p;
      st.px.col(i) += p * xn;
      st.pfx.col(i) += p * target.features.col(j);
      if (keep_dense) (*st.dense)(i, j) = p;
    }
  }
  finish_totals(st, target);
  return st;
}

MatchingStats nystrom_matching(const InferenceState& state, const DiscretizedFunction& target,
                               const DiscretizedFunction& source, const HyperParams& params,
                               const ModelTerms& terms, int landmarks, std::uint64_t seed) {
  const Index m = source.size(), n = target.size(), dim = target.dim(), fdim = target.feature_dim();
  const LikelihoodSetup setup = make_setup(state, dim, params, terms);
  MatchingStats st = empty_stats(m, n, dim, fdim);
  if (setup.log_norm == -kInfinity) {
    finish_totals(st, target);
    return st;
  }

  Index count = landmarks;
  if (count > std::min(m, n)) {
    warn("Nystrom rank J=" + std::to_string(landmarks) + " clamped to min(M, N)=" + std::to_string(std::min(m, n)));
    count = std::min(m, n);
  }
  count = std::max<Index>(count, 1);

  // Landmarks come from the smaller point set, so J = min(M, N) reproduces the
  // dense matrix. Prefixes of one seeded permutation nest smaller J in larger J.
  const bool from_source = m <= n;
  std::vector<Index> order(static_cast<std::size_t>(from_source ? m : n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(count));

  // Augmented coordinates in which the likelihood is a unit Gaussian kernel.
  const Index aug = dim + (setup.use_features ? fdim : 0);
  const double inv_sigma = 1.0 / std::sqrt(state.sigma2);
  Matrix src(aug, m), tgt(aug, n);
  src.topRows(dim) = state.y_hat * inv_sigma;
  tgt.topRows(dim) = target.points * inv_sigma;
  if (setup.use_features) {
    const Vector w = (setup.zeta * setup.inv_pi).cwiseSqrt();
    src.bottomRows(fdim) = w.asDiagonal() * source.features;
    tgt.bottomRows(fdim) = w.asDiagonal() * target.features;
    st.feature_evaluations += static_cast<std::size_t>((m + n + count) * count);
  }
  Matrix land(aug, count);
  for (Index j = 0; j < count; ++j) land.col(j) = (from_source ? src : tgt).col(order[static_cast<std::size_t>(j)]);

  auto gauss = [](const Matrix& a, const Matrix& b) {
    Matrix k = (a.transpose() * b * 2.0).colwise() - a.colwise().squaredNorm().transpose();
    k.rowwise() -= b.colwise().squaredNorm();
    return (0.5 * k.array().min(0.0)).exp().matrix().eval();
  };
  const Matrix k_ml = gauss(src, land);   // M x J
  const Matrix k_ln = gauss(land, tgt);   // J x N
  const Matrix k_ll = gauss(land, land);  // J x J

  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (k_ll + k_ll.transpose()));
  const double top = eig.eigenvalues().maxCoeff();
  Vector inv = eig.eigenvalues();
  for (Index j = 0; j < count; ++j) inv(j) = inv(j) > 1e-10 * top ? 1.0 / inv(j) : 0.0;
  const Matrix pinv = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();

  const Vector a = setup.row_log.array().exp();
  const Vector q = (k_ln.transpose() * (pinv * (k_ml.transpose() * a))).cwiseMax(0.0);
  Vector inv_den(n);
  for (Index j = 0; j < n; ++j) {
    const double lo = terms.log_outlier(j);
    const double r = lo == -kInfinity ? 0.0 : std::exp(lo - setup.log_norm);
    const double den = q(j) + r;
    if (!(den > 0.0) || !std::isfinite(den)) {
      inv_den(j) = 0.0;
      if (!(den > 0.0)) ++st.underflow_columns;
    } else {
      inv_den(j) = 1.0 / den;
    }
  }
  st.nu_prime = (q.array() * inv_den.array()).min(1.0).max(0.0).matrix();

  Matrix rhs(n, dim + fdim + 1);
  rhs.leftCols(dim) = target.points.transpose();
  rhs.middleCols(dim, fdim) = target.features.transpose();
  rhs.col(dim + fdim).setOnes();
  rhs = inv_den.asDiagonal() * rhs;
  const Matrix proj = a.asDiagonal() * (k_ml * (pinv * (k_ln * rhs)));  // M x (D + D' + 1)

  st.nu = proj.col(dim + fdim).cwiseMax(0.0);
  st.px = proj.leftCols(dim).transpose();
  st.pfx = proj.middleCols(dim, fdim).transpose();
  finish_totals(st, target);
  return st;
}

}  // namespace det
