#include "det/inference.hpp"

#include "det/sampling.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <chrono>
#include <cmath>
#include <numbers>

namespace det {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
// Iteration at which the early (Nystrom) matching stage ends at the latest.
constexpr int kLateStageIteration = 30;

// sum_mn p_mn |x_n - yhat_m|^2 from the sufficient statistics.
double spatial_residual(const MatchingStats& st, const Matrix& y_hat) {
  return st.x_sq - 2.0 * y_hat.cwiseProduct(st.px).sum() +
         (y_hat.colwise().squaredNorm().transpose().array() * st.nu.array()).sum();
}

// Row d: sum_mn p_mn (f_X^d(x_n) - f_Y^d(y_m))^2.
Vector feature_residual(const MatchingStats& st, const Matrix& source_features) {
  return st.fx_sq - 2.0 * source_features.cwiseProduct(st.pfx).rowwise().sum() +
         source_features.array().square().matrix() * st.nu;
}

}  // namespace

InferenceState initialize(const DiscretizedFunction& target, const DiscretizedFunction& source,
                          const HyperParams& params) {
  target.validate();
  source.validate();
  const Index n = target.size(), m = source.size(), dim = target.dim();
  const double nm = static_cast<double>(n) * static_cast<double>(m);

  InferenceState state;
  state.transform = SimilarityTransform::identity(dim);
  state.v_hat = Matrix::Zero(dim, m);
  state.sigma_diag = Vector::Ones(m);
  state.alpha = Vector::Constant(m, 1.0 / static_cast<double>(m));
  state.y_hat = source.points;

  // sum_nm |x_n - y_m|^2 = M sum|x|^2 + N sum|y|^2 - 2 (sum x).(sum y)
  const double pair_sq = static_cast<double>(m) * target.points.squaredNorm() +
                         static_cast<double>(n) * source.points.squaredNorm() -
                         2.0 * target.points.rowwise().sum().dot(source.points.rowwise().sum());
  state.sigma2 = std::max(params.gamma * pair_sq / (nm * static_cast<double>(dim)), kSigma2Floor);

  const Vector feat_pair = static_cast<double>(m) * target.features.array().square().rowwise().sum().matrix() +
                           static_cast<double>(n) * source.features.array().square().rowwise().sum().matrix() -
                           2.0 * target.features.rowwise().sum().cwiseProduct(source.features.rowwise().sum());
  state.pi_diag = (params.gamma * feat_pair / nm).cwiseMax(kPiFloor);
  return state;
}

void update_displacement(InferenceState& state, const DiscretizedFunction& source, const CoherenceKernel& kernel,
                         const HyperParams& params, const StepOptions& options) {
  const MatchingStats& st = state.matching;
  const Index m = source.size(), dim = source.dim();

  if (options.pin_displacement) {
    state.v_hat.setZero(dim, m);
    state.sigma_diag.setZero(m);
    state.kl_displacement = 0.0;
  } else {
    if (kernel.size() != m) throw ParameterError("coherence kernel size does not match the source point count");
    const double s = state.transform.s;
    if (!(s > 0.0)) throw CollapseError("scale collapsed to zero");
    const double c = s * s / state.sigma2;
    const Matrix& rot = state.transform.R;

    // d(nu) (T^{-1}(xhat) - y) without dividing by nu.
    const Matrix resid =
        (rot.transpose() * (st.px - state.transform.t * st.nu.transpose())) / s - source.points * st.nu.asDiagonal();

    const Matrix factor = kernel.factor();  // M x r
    const Index r = factor.cols();
    Matrix inner = factor.transpose() * st.nu.asDiagonal() * factor * c;
    inner.diagonal().array() += params.lambda;
    Eigen::LLT<Matrix> llt(inner);
    if (llt.info() != Eigen::Success || !inner.allFinite())
      throw StiffnessError("displacement posterior system is singular; increase lambda");

    const Matrix mean = c * llt.solve(factor.transpose() * resid.transpose());  // r x D
    state.v_hat = (factor * mean).transpose();
    const Matrix z = llt.matrixL().solve(factor.transpose());  // r x M
    state.sigma_diag = z.colwise().squaredNorm().transpose();

    if (options.track_elbo) {
      const Matrix l_inv = llt.matrixL().solve(Matrix::Identity(r, r));
      const double trace_inv = l_inv.squaredNorm();
      const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      const double rr = static_cast<double>(r);
      const double per_coord = params.lambda * trace_inv - rr - rr * std::log(params.lambda) + log_det;
      state.kl_displacement = 0.5 * (static_cast<double>(dim) * per_coord + params.lambda * mean.squaredNorm());
    } else {
      state.kl_displacement.reset();
    }
  }

  if (std::isfinite(params.kappa)) {
    using boost::math::digamma;
    const double denom = digamma(params.kappa * static_cast<double>(m) + st.n_hat);
    for (Index i = 0; i < m; ++i) state.alpha(i) = std::exp(digamma(params.kappa + st.nu(i)) - denom);
  }
}

Matrix proper_rotation(const Matrix& cross_covariance) {
  Eigen::JacobiSVD<Matrix> svd(cross_covariance, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix& u = svd.matrixU();
  const Matrix& v = svd.matrixV();
  Vector flip = Vector::Ones(cross_covariance.rows());
  flip(flip.size() - 1) = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return u * flip.asDiagonal() * v.transpose();
}

void update_global(InferenceState& state, const DiscretizedFunction& target, const DiscretizedFunction& source,
                   const HyperParams& /*params*/, const StepOptions& options) {
  const MatchingStats& st = state.matching;
  const Index dim = source.dim();
  const double n_hat = st.n_hat;
  if (!(n_hat >= kCollapseThreshold))
    throw CollapseError("registration collapsed: every target point classified as an outlier");

  const Matrix u = source.points + state.v_hat;
  const Vector x_bar = st.px.rowwise().sum() / n_hat;
  const Vector u_bar = u * st.nu / n_hat;
  const double s_bar2 = st.nu.dot(state.sigma_diag) / n_hat;

  const Matrix s_xu = st.px * u.transpose() / n_hat - x_bar * u_bar.transpose();
  Matrix s_uu = u * st.nu.asDiagonal() * u.transpose() / n_hat - u_bar * u_bar.transpose();
  s_uu.diagonal().array() += s_bar2;

  SimilarityTransform& tr = state.transform;
  tr.R = proper_rotation(s_xu);
  tr.s = options.pin_scale ? 1.0 : (tr.R.transpose() * s_xu).trace() / s_uu.trace();
  tr.t = x_bar - tr.s * tr.R * u_bar;
  state.y_hat = tr.apply(u);

  const double sigma2 = spatial_residual(st, state.y_hat) / (n_hat * static_cast<double>(dim)) + tr.s * tr.s * s_bar2;
  state.sigma2 = std::max(sigma2, kSigma2Floor);
  state.pi_diag = (feature_residual(st, source.features) / n_hat).cwiseMax(kPiFloor);
  (void)target;
}

std::optional<double> evaluate_elbo(const InferenceState& state, const DiscretizedFunction& target,
                                    const DiscretizedFunction& source, const HyperParams& params,
                                    const ModelTerms& terms) {
  const MatchingStats& st = state.matching;
  if (!st.exact || std::isfinite(params.kappa) || !state.kl_displacement) return std::nullopt;
  const double dim = static_cast<double>(target.dim());
  const double s2 = state.transform.s * state.transform.s;

  double fit = -0.5 * st.n_hat * dim * std::log(kTwoPi * state.sigma2) -
               spatial_residual(st, state.y_hat) / (2.0 * state.sigma2) -
               s2 * dim * st.nu.dot(state.sigma_diag) / (2.0 * state.sigma2);
  if (terms.zeta > 0.0) {
    const Vector qf = feature_residual(st, source.features);
    fit += terms.zeta * (-0.5 * st.n_hat * (kTwoPi * state.pi_diag.array()).log().sum() -
                         0.5 * (qf.array() / state.pi_diag.array()).sum());
  }
  if (st.n_hat > 0.0) fit += st.n_hat * std::log1p(-params.omega);
  fit += st.nu.dot(state.alpha_log());
  return fit + st.outlier_energy + st.assignment_entropy - *state.kl_displacement;
}

RegistrationResult run_det(const DiscretizedFunction& target, const DiscretizedFunction& source,
                           const HyperParams& params, const CoherenceKernel& kernel, const RunOptions& options) {
  params.validate();
  const ModelTerms terms = make_model_terms(target, source, params);
  InferenceState state = initialize(target, source, params);
  if (options.pin_displacement) state.sigma_diag.setZero();

  const bool nystrom_early = params.p_rank.has_value();
  const bool prune_late = std::isfinite(params.radius_factor);
  const bool exact_mode = !nystrom_early && !prune_late && !std::isfinite(params.kappa);
  StepOptions step{options.pin_displacement, options.pin_scale, options.track_elbo && exact_mode};

  RegistrationResult result;
  bool late = false;
  using clock = std::chrono::steady_clock;
  for (int iter = 1; iter <= params.max_iter; ++iter) {
    const auto started = clock::now();
    const bool use_late_mode = late || !nystrom_early;
    if (!late && nystrom_early) {
      state.matching = nystrom_matching(state, target, source, params, terms, *params.p_rank,
                                        options.seed + static_cast<std::uint64_t>(iter));
    } else if (late && prune_late) {
      state.matching = kdtree_matching(state, target, source, params, terms, params.radius_factor);
    } else {
      state.matching = dense_matching(state, target, source, params, terms);
    }
    result.underflow_columns += state.matching.underflow_columns;

    const double previous = state.sigma2;
    update_displacement(state, source, kernel, params, step);
    update_global(state, target, source, params, step);
    const double change = std::abs(state.sigma2 - previous) / previous;

    IterationRecord rec;
    rec.iteration = iter;
    rec.sigma2 = state.sigma2;
    rec.n_hat = state.matching.n_hat;
    if (step.track_elbo) rec.elbo = evaluate_elbo(state, target, source, params, terms);
    rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - started).count();
    rec.accelerated = !state.matching.exact;
    result.diagnostics.push_back(rec);
    if (options.observer) options.observer(rec, state);
    result.iterations = iter;

    if (!late && (change < 10.0 * params.conv_tol || iter >= kLateStageIteration)) late = true;
    if (change < params.conv_tol && use_late_mode) {
      result.converged = true;
      break;
    }
  }

  result.deformed_domain = state.y_hat;
  result.displacement = state.v_hat;
  result.transform = state.transform;
  result.nonoutlier_prob = state.matching.nu_prime;
  result.sigma2 = state.sigma2;
  result.pi_diag = state.pi_diag;
  result.matched_count = state.matching.n_hat;
  result.displacement_var = state.sigma_diag;
  result.mixing_weights = state.alpha;
  return result;
}

}  // namespace det
