#include "det/inference.hpp"
#include "det/kernel.hpp"
#include "det/metrics.hpp"

#include "oracle.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace det;

namespace {

DiscretizedFunction make_fn(const Matrix& pts, const Matrix& feats) { return DiscretizedFunction{pts, feats}; }

}  // namespace

TEST_CASE("initialize: single pair gives sigma2 0.5") {
  Matrix x(2, 1), y(2, 1), f(1, 1);
  x << 0, 0;
  y << 1, 0;
  f << 0;
  HyperParams p;
  p.gamma = 1.0;
  const InferenceState st = initialize(make_fn(x, f), make_fn(y, f), p);
  CHECK(st.sigma2 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(st.transform.s == 1.0);
  CHECK(st.v_hat.isZero());
  CHECK(st.sigma_diag.isOnes());
  CHECK(st.alpha(0) == 1.0);
}

TEST_CASE("initialize: moment identity equals the naive double sum") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  Matrix x(2, 30), y(2, 30), fx(3, 30), fy(3, 30);
  for (Matrix* m : {&x, &y, &fx, &fy})
    for (Index i = 0; i < m->size(); ++i) m->data()[i] = normal(rng) + 0.5;
  HyperParams p;
  p.gamma = 0.7;
  const InferenceState st = initialize(make_fn(x, fx), make_fn(y, fy), p);
  long double sum = 0;
  oracle::LVector fsum = oracle::LVector::Zero(3);
  for (Index n = 0; n < 30; ++n)
    for (Index m = 0; m < 30; ++m) {
      sum += (x.col(n) - y.col(m)).cast<long double>().squaredNorm();
      fsum += (fx.col(n) - fy.col(m)).cast<long double>().cwiseAbs2();
    }
  const double want = static_cast<double>(0.7L * sum / (30.0L * 30 * 2));
  CHECK(std::abs(st.sigma2 - want) <= 1e-9 * want);
  for (Index d = 0; d < 3; ++d) {
    const double w = static_cast<double>(0.7L * fsum(d) / 900.0L);
    CHECK(std::abs(st.pi_diag(d) - w) <= 1e-9 * w);
  }
}

TEST_CASE("initialize: identical inputs keep sigma2 positive and floor Pi") {
  Matrix x(2, 3), f(1, 3);
  x << 0, 1, 0, 0, 0, 1;
  f << 2, 2, 2;
  HyperParams p;
  const InferenceState st = initialize(make_fn(x, f), make_fn(x, f), p);
  CHECK(st.sigma2 > 0.0);
  CHECK(st.pi_diag(0) == kPiFloor);
}

TEST_CASE("outlier density") {
  SUBCASE("unit boxes with one feature") {
    Matrix x(2, 2), f(1, 2);
    x << 0, 1, 0, 1;
    f << 0, 1;
    const TargetStats st = TargetStats::compute(make_fn(x, f));
    CHECK(outlier_density(f.col(0), st, 1.0) == doctest::Approx(1.0));
  }
  SUBCASE("high feature dimension at the marginal mean") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    Matrix x(2, 50), f(20, 50);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
    for (Index i = 0; i < f.size(); ++i) f.data()[i] = normal(rng) * (1 + i % 3);
    const TargetStats st = TargetStats::compute(make_fn(x, f));
    const Vector mean = f.rowwise().mean();
    long double want = 1.0L / ((x.row(0).maxCoeff() - x.row(0).minCoeff()) * (x.row(1).maxCoeff() - x.row(1).minCoeff()));
    for (Index d = 0; d < 20; ++d) {
      const long double var = (f.row(d).array() - mean(d)).square().mean();
      want *= 1.0L / std::sqrt(2.0L * std::numbers::pi_v<long double> * var);
    }
    CHECK(outlier_density(mean, st, 1.0) == doctest::Approx(static_cast<double>(want)).epsilon(1e-10));
  }
  SUBCASE("zeta zero ignores features") {
    Matrix x(2, 2), f(1, 2);
    x << 0, 2, 0, 2;
    f << 0, 5;
    const TargetStats st = TargetStats::compute(make_fn(x, f));
    CHECK(outlier_density(f.col(1), st, 0.0) == doctest::Approx(0.25));
  }
  SUBCASE("zero spatial volume is degenerate") {
    Matrix x(2, 2), f(1, 2);
    x << 0, 1, 0, 0;
    f << 0, 1;
    CHECK_THROWS_AS(TargetStats::compute(make_fn(x, f)), DegenerateInputError);
  }
}

TEST_CASE("matching: closed-form corner cases") {
  std::mt19937_64 rng(11);
  oracle::Instance in = oracle::random_instance(rng);
  SUBCASE("one component and no outliers") {
    in.source.points = in.source.points.leftCols(1).eval();
    in.source.features = in.source.features.leftCols(1).eval();
    in.params.omega = 0.0;
    InferenceState st = initialize(in.target, in.source, in.params);
    const ModelTerms terms = make_model_terms(in.target, in.source, in.params);
    update_matching(st, in.target, in.source, in.params, terms, true);
    CHECK((st.matching.dense->array() - 1.0).abs().maxCoeff() < 1e-15);
    CHECK(st.matching.n_hat == doctest::Approx(static_cast<double>(in.target.size())));
  }
  SUBCASE("everything outlier") {
    in.params.omega = 1.0;
    InferenceState st = initialize(in.target, in.source, in.params);
    const ModelTerms terms = make_model_terms(in.target, in.source, in.params);
    update_matching(st, in.target, in.source, in.params, terms, true);
    CHECK(st.matching.dense->isZero());
    CHECK(st.matching.n_hat == 0.0);
    CHECK_THROWS_AS(update_global(st, in.target, in.source, in.params), CollapseError);
  }
}

TEST_CASE("matching: random 8x8 instance matches the log-domain oracle") {
  std::mt19937_64 rng(5);
  oracle::Instance in = oracle::random_instance(rng);
  in.source.points.conservativeResize(2, 8);
  in.source.points.setRandom();
  in.source.features = Matrix::Random(3, 8);
  in.target.points = Matrix::Random(2, 8);
  in.target.features = Matrix::Random(3, 8);
  InferenceState& st = in.state;
  st.transform = SimilarityTransform::identity(2);
  st.v_hat = Matrix::Zero(2, 8);
  st.sigma_diag = Vector::Constant(8, 0.01);
  st.alpha = Vector::Constant(8, 1.0 / 8);
  st.pi_diag = Vector::Constant(3, 0.5);
  st.y_hat = in.source.points;
  const double zeta = compute_zeta(in.params.eta, 2, 3);
  const ModelTerms terms = make_model_terms(in.target, in.source, in.params);
  const auto want = oracle::matching(st, in.target, in.source, in.params.omega, zeta,
                                     oracle::LVector::Constant(8, oracle::box_outlier_log(in.target, zeta)));
  update_matching(st, in.target, in.source, in.params, terms, true);
  const Matrix& P = *st.matching.dense;
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j)
      CHECK(std::abs(P(i, j) - static_cast<double>(want.P(i, j))) <= 1e-12 * static_cast<double>(want.P(i, j)) + 1e-300);
  for (Index j = 0; j < 8; ++j) CHECK(st.matching.nu_prime(j) <= 1.0 + 1e-12);
  CHECK(std::abs(st.matching.nu.sum() - st.matching.nu_prime.sum()) < 1e-12);
}

TEST_CASE("each update block matches the dense oracle") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 12; ++rep) {
    const bool finite_kappa = rep % 3 == 2;
    const oracle::Instance in = oracle::conditioned_instance(rng, finite_kappa);
    const oracle::BlockErrors err = oracle::compare_blocks(in);
    CAPTURE(rep);
    CHECK(err.matching < 1e-8);
    CHECK(err.displacement < 1e-8);
    CHECK(err.global < 1e-8);
  }
}

TEST_CASE("displacement: no evidence keeps the prior") {
  std::mt19937_64 rng(8);
  oracle::Instance in = oracle::conditioned_instance(rng);
  InferenceState& st = in.state;
  const Index m = in.source.size(), dim = in.source.dim();
  st.matching.nu = Vector::Zero(m);
  st.matching.px = Matrix::Zero(dim, m);
  st.matching.n_hat = 0.0;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  update_displacement(st, in.source, kernel, in.params);
  CHECK(st.v_hat.cwiseAbs().maxCoeff() == 0.0);
  // Sigma = G / lambda, so sigma_m^2 = 1 / lambda
  CHECK((st.sigma_diag.array() - 1.0 / in.params.lambda).abs().maxCoeff() < 1e-10);
}

TEST_CASE("displacement: huge stiffness pins v") {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 5; ++rep) {
    oracle::Instance in = oracle::random_instance(rng);
    in.params.lambda = 1e12;
    const ModelTerms terms = make_model_terms(in.target, in.source, in.params);
    update_matching(in.state, in.target, in.source, in.params, terms);
    const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
    update_displacement(in.state, in.source, kernel, in.params);
    CHECK(in.state.v_hat.cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("displacement: non-finite inner system raises a stiffness error") {
  std::mt19937_64 rng(10);
  oracle::Instance in = oracle::random_instance(rng);
  const ModelTerms terms = make_model_terms(in.target, in.source, in.params);
  update_matching(in.state, in.target, in.source, in.params, terms);
  in.state.sigma2 = 1e-320;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  CHECK_THROWS_AS(update_displacement(in.state, in.source, kernel, in.params), StiffnessError);
}

TEST_CASE("proper rotation") {
  CHECK(proper_rotation(Matrix::Identity(2, 2)).isApprox(Matrix::Identity(2, 2), 1e-15));
  Matrix flip(2, 2);
  flip << 1, 0, 0, -1;
  const Matrix r = proper_rotation(flip);
  CHECK(r.isApprox(Matrix::Identity(2, 2), 1e-12));
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = Matrix::Random(3, 3);
    const Matrix q = proper_rotation(a);
    CHECK((q.transpose() * q - Matrix::Identity(3, 3)).norm() < 1e-10);
    CHECK(q.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("global: planted similarity with hard correspondences") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Matrix y(2, 15), f = Matrix::Random(1, 15);
  for (Index i = 0; i < y.size(); ++i) y.data()[i] = unit(rng);
  SimilarityTransform planted;
  planted.s = 1.7;
  planted.R.resize(2, 2);
  planted.R << std::cos(2.1), -std::sin(2.1), std::sin(2.1), std::cos(2.1);
  planted.t = Vector(2);
  planted.t << 0.4, -1.1;
  const Matrix x = planted.apply(y);
  const DiscretizedFunction target{x, f}, source{y, f};
  HyperParams p;
  InferenceState st = initialize(target, source, p);
  st.sigma_diag.setZero();
  st.matching.nu = Vector::Ones(15);
  st.matching.nu_prime = Vector::Ones(15);
  st.matching.n_hat = 15;
  st.matching.px = x;
  st.matching.pfx = f;
  st.matching.x_sq = x.squaredNorm();
  st.matching.fx_sq = f.array().square().rowwise().sum();
  update_global(st, target, source, p);
  CHECK(std::abs(st.transform.s - planted.s) < 1e-6);
  CHECK((st.transform.R - planted.R).norm() < 1e-6);
  CHECK((st.transform.t - planted.t).norm() < 1e-6);
  CHECK(st.sigma2 < 1e-10);
}

TEST_CASE("ELBO is non-decreasing in exact mode") {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 4; ++rep) {
    oracle::Instance in = oracle::conditioned_instance(rng);
    in.params.max_iter = 60;
    in.params.conv_tol = 1e-14;
    const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
    const RegistrationResult res = run_det(in.target, in.source, in.params, kernel);
    REQUIRE(res.diagnostics.size() >= 2);
    for (std::size_t i = 1; i < res.diagnostics.size(); ++i) {
      REQUIRE(res.diagnostics[i].elbo.has_value());
      CHECK(*res.diagnostics[i].elbo >= *res.diagnostics[i - 1].elbo - 1e-9);
    }
  }
}

TEST_CASE("run_det: already registered copy") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Matrix pts(2, 60), f(2, 60);
  for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = unit(rng);
  for (Index i = 0; i < f.size(); ++i) f.data()[i] = unit(rng);
  const NormalizedDomains nd = normalize_domains(pts, pts, false);
  const DiscretizedFunction fn{nd.target, f};
  HyperParams p;
  p.omega = 0.0;
  SUBCASE("default stiffness reproduces the target exactly") {
    const CoherenceKernel kernel = surface_coherence(fn.points, f, p);
    const RegistrationResult res = run_det(fn, fn, p, kernel);
    CHECK((res.deformed_domain - fn.points).cwiseAbs().maxCoeff() < 1e-4);
    CHECK(jaccard_index(res.deformed_domain, fn.points, 0.05) == 1.0);
    CHECK(res.transform.is_proper());
    CHECK((res.deformed_domain - res.transform.apply(fn.points + res.displacement)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("stiff prior leaves no displacement") {
    p.lambda = 1e5;
    const CoherenceKernel kernel = surface_coherence(fn.points, f, p);
    const RegistrationResult res = run_det(fn, fn, p, kernel);
    CHECK(res.converged);
    CHECK(res.displacement.cwiseAbs().maxCoeff() < 1e-3);
    CHECK(jaccard_index(res.deformed_domain, fn.points, 0.05) == 1.0);
  }
}

TEST_CASE("run_det: zeta = 0 ignores feature values") {
  std::mt19937_64 rng(14);
  oracle::Instance in = oracle::conditioned_instance(rng);
  in.params.eta = 0.0;
  in.params.max_iter = 40;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  const RegistrationResult a = run_det(in.target, in.source, in.params, kernel);
  oracle::Instance zeroed = in;
  zeroed.source.features.setZero();
  zeroed.target.features.setZero();
  const RegistrationResult b = run_det(zeroed.target, zeroed.source, zeroed.params, kernel);
  CHECK((a.deformed_domain - b.deformed_domain).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((a.nonoutlier_prob - b.nonoutlier_prob).cwiseAbs().maxCoeff() <= 1e-12);
  REQUIRE(a.diagnostics.size() == b.diagnostics.size());
  for (std::size_t i = 0; i < a.diagnostics.size(); ++i)
    CHECK(std::abs(a.diagnostics[i].sigma2 - b.diagnostics[i].sigma2) <= 1e-12 * a.diagnostics[i].sigma2);
}

TEST_CASE("run_det: permuting target points permutes nu' and keeps y_hat") {
  std::mt19937_64 rng(15);
  oracle::Instance in = oracle::conditioned_instance(rng);
  in.params.max_iter = 50;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  const RegistrationResult a = run_det(in.target, in.source, in.params, kernel);
  const Index n = in.target.size();
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = n - 1 - i;
  DiscretizedFunction shuffled = in.target;
  for (Index i = 0; i < n; ++i) {
    shuffled.points.col(i) = in.target.points.col(perm[static_cast<std::size_t>(i)]);
    shuffled.features.col(i) = in.target.features.col(perm[static_cast<std::size_t>(i)]);
  }
  const RegistrationResult b = run_det(shuffled, in.source, in.params, kernel);
  CHECK((a.deformed_domain - b.deformed_domain).cwiseAbs().maxCoeff() < 1e-10);
  for (Index i = 0; i < n; ++i)
    CHECK(std::abs(b.nonoutlier_prob(i) - a.nonoutlier_prob(perm[static_cast<std::size_t>(i)])) < 1e-10);
}

TEST_CASE("run_det: invariants hold at every iteration") {
  std::mt19937_64 rng(16);
  oracle::Instance in = oracle::conditioned_instance(rng);
  in.params.max_iter = 30;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  RunOptions opts;
  int checked = 0;
  opts.observer = [&](const IterationRecord&, const InferenceState& st) {
    ++checked;
    CHECK(st.transform.is_proper());
    CHECK(st.sigma2 >= kSigma2Floor);
    CHECK(st.pi_diag.minCoeff() >= kPiFloor);
    CHECK(st.matching.nu_prime.maxCoeff() <= 1.0 + 1e-8);
    CHECK(st.matching.nu_prime.minCoeff() >= 0.0);
    CHECK(std::abs(st.matching.nu.sum() - st.matching.nu_prime.sum()) < 1e-6);
    CHECK((st.alpha.array() - 1.0 / static_cast<double>(in.source.size())).abs().maxCoeff() == 0.0);
  };
  run_det(in.target, in.source, in.params, kernel, opts);
  CHECK(checked > 0);
}

TEST_CASE("run_det: pinned displacement stays rigid") {
  std::mt19937_64 rng(17);
  oracle::Instance in = oracle::conditioned_instance(rng);
  in.params.max_iter = 20;
  const CoherenceKernel kernel = surface_coherence(in.source.points, in.source.features, in.params);
  RunOptions opts;
  opts.pin_displacement = true;
  opts.pin_scale = true;
  const RegistrationResult res = run_det(in.target, in.source, in.params, kernel, opts);
  CHECK(res.displacement.isZero());
  CHECK(res.transform.s == 1.0);
}
