#include "det/pipeline.hpp"

#include "det/sampling.hpp"

#include <cmath>
#include <span>
#include <utility>

namespace det {

namespace {

DiscretizedFunction subset(const Matrix& points, const Matrix& features, const std::vector<Index>& idx) {
  DiscretizedFunction out;
  out.points.resize(points.rows(), static_cast<Index>(idx.size()));
  out.features.resize(features.rows(), static_cast<Index>(idx.size()));
  for (Index j = 0; j < static_cast<Index>(idx.size()); ++j) {
    out.points.col(j) = points.col(idx[static_cast<std::size_t>(j)]);
    out.features.col(j) = features.col(idx[static_cast<std::size_t>(j)]);
  }
  return out;
}

SampleSet draw(const Matrix& points, const Matrix& features, const std::optional<int>& requested, bool use_features,
               const HyperParams& p, std::uint64_t seed) {
  if (!requested) {
    SampleSet all;
    all.indices.resize(static_cast<std::size_t>(points.cols()));
    for (Index i = 0; i < points.cols(); ++i) all.indices[static_cast<std::size_t>(i)] = i;
    return all;
  }
  const double cell = p.cell_size ? *p.cell_size : default_cell_size(points);
  return vgis_sample(points, use_features ? &features : nullptr, *requested, p.lambda_g, p.epsilon, cell, seed);
}

std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage, std::uint64_t salt) {
  // splitmix64 step so neighboring seeds give unrelated streams
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (4 * stage + salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Nonoutlier probability of every (full-resolution) target point against the
// registered sampled source.
Vector full_resolution_nu_prime(const DiscretizedFunction& target, const DiscretizedFunction& source,
                                const RegistrationResult& res, const HyperParams& p) {
  const ModelTerms terms = make_model_terms(target, source, p);
  InferenceState state;
  state.transform = res.transform;
  state.v_hat = res.displacement;
  state.sigma_diag = res.displacement_var;
  state.alpha = res.mixing_weights;
  state.sigma2 = res.sigma2;
  state.pi_diag = res.pi_diag;
  state.y_hat = res.deformed_domain;
  if (std::isfinite(p.radius_factor))
    return kdtree_matching(state, target, source, p, terms, p.radius_factor).nu_prime;
  return dense_matching(state, target, source, p, terms).nu_prime;
}

}  // namespace

HyperParams Stage::effective_params() const {
  HyperParams p = params;
  if (mode == StageMode::rigid) p.lambda = kRigidStiffness;
  return p;
}

void StageSchedule::validate() const {
  if (stages.empty()) throw ParameterError("schedule needs at least one stage");
  for (std::size_t l = 0; l < stages.size(); ++l) {
    stages[l].effective_params().validate();
    if (l == 0) continue;
    if (stages[l].params.beta > stages[l - 1].params.beta)
      throw ParameterError("stage " + std::to_string(l + 1) + ": beta must not increase across stages");
    if (stages[l].params.eta > stages[l - 1].params.eta)
      throw ParameterError("stage " + std::to_string(l + 1) + ": eta must not increase across stages");
  }
}

StageSchedule default_schedule(SchedulePreset preset) {
  StageSchedule schedule;
  if (preset == SchedulePreset::rigid_then_fine) {
    Stage coarse;
    coarse.mode = StageMode::rigid;
    coarse.params.lambda = kRigidStiffness;
    coarse.params.omega = 0.1;
    coarse.params.gamma = 1.0;
    coarse.params.beta = 2.0;
    coarse.params.tau = 0.0;
    coarse.params.eta = 2.0;
    coarse.params.p_rank = 300;
    coarse.params.g_rank = 100;
    coarse.params.source_samples = 500;
    coarse.params.target_samples = 500;

    Stage fine;
    fine.mode = StageMode::nonrigid;
    fine.params.lambda = 10.0;
    fine.params.omega = 0.1;
    fine.params.gamma = 0.1;
    fine.params.beta = 1.0;
    fine.params.tau = 0.0;
    fine.params.eta = 1.0;
    fine.params.p_rank = 300;
    fine.params.g_rank = 100;
    fine.params.source_samples = 5000;
    fine.params.target_samples = 5000;
    schedule.stages = {coarse, fine};
  } else {
    Stage only;
    only.params.lambda = 1.0;
    only.params.omega = 0.1;
    only.params.gamma = 0.1;
    only.params.beta = 1.0;
    only.params.tau = 0.1;
    only.params.eta = 1.0;
    only.params.p_rank = 300;
    only.params.g_rank = 100;
    only.params.source_samples = 50000;
    only.params.target_samples = 50000;
    schedule.stages = {only};
  }
  return schedule;
}

StageError::StageError(int stage, const std::string& what, std::vector<StageDiagnostics> completed, bool numerical)
    : Error("stage " + std::to_string(stage) + ": " + what),
      stage_(stage),
      numerical_(numerical),
      completed_(std::move(completed)) {}

HierarchicalResult hierarchical_register(const DiscretizedFunction& target, const DiscretizedFunction& source,
                                         const StageSchedule& schedule, std::uint64_t seed,
                                         const PipelineOptions& options) {
  schedule.validate();
  target.validate();
  source.validate();
  if (target.dim() != source.dim()) throw ParameterError("target and source dimensions differ");
  if (target.feature_dim() != source.feature_dim()) throw ParameterError("target and source feature dimensions differ");

  const NormalizedFeatures nf = normalize_features(target.features, source.features);
  const Index dim = source.dim();

  HierarchicalResult out;
  SimilarityTransform total = SimilarityTransform::identity(dim);
  Matrix current = source.points;
  RegistrationResult last;
  std::size_t underflow = 0;

  for (std::size_t l = 0; l < schedule.stages.size(); ++l) {
    const Stage& stage = schedule.stages[l];
    const int stage_no = static_cast<int>(l) + 1;
    StageDiagnostics diag;
    diag.stage = stage_no;
    diag.mode = stage.mode;

    std::vector<std::string> captured;
    try {
      WarningCapture capture;
      HyperParams p = stage.effective_params();
      const NormalizedDomains nd = normalize_domains(target.points, current, l == 0 ? options.pre_aligned : true);
      const bool use_features = compute_zeta(p.eta, dim, target.feature_dim()) > 0.0;

      const SampleSet tgt_idx = draw(nd.target, nf.target, p.target_samples, use_features, p, stage_seed(seed, l, 0));
      const SampleSet src_idx = draw(nd.source, nf.source, p.source_samples, use_features, p, stage_seed(seed, l, 1));
      const DiscretizedFunction tgt = subset(nd.target, nf.target, tgt_idx.indices);
      const DiscretizedFunction src = subset(nd.source, nf.source, src_idx.indices);
      diag.target_samples = tgt.size();
      diag.source_samples = src.size();

      if (p.g_rank && *p.g_rank > src.size()) {
        warn("kernel rank K=" + std::to_string(*p.g_rank) + " clamped to the source sample size " +
             std::to_string(src.size()));
        p.g_rank = static_cast<int>(src.size());
      }
      const CoherenceKernel kernel = surface_coherence(src.points, src.features, p);
      RunOptions run;
      run.pin_displacement = stage.pin_displacement;
      run.seed = stage_seed(seed, l, 2);
      last = run_det(tgt, src, p, kernel, run);
      underflow += last.underflow_columns;

      const bool source_sampled = src.size() < source.size();
      const Matrix v_norm = source_sampled
                                ? interpolate_displacement(nd.source, src.points, last.displacement, p.beta,
                                                           std::span<const Index>(src_idx.indices))
                                : last.displacement;
      if (tgt.size() < target.size()) {
        const DiscretizedFunction full_target{nd.target, nf.target};
        last.nonoutlier_prob = full_resolution_nu_prime(full_target, src, last, p);
      }

      // Stage transform in original coordinates.
      const NormalizationRecord& rec = nd.record;
      SimilarityTransform t_orig;
      t_orig.s = rec.target_scale * last.transform.s / rec.source_scale;
      t_orig.R = last.transform.R;
      t_orig.t = rec.target_scale * last.transform.t + rec.target_mean - t_orig.s * t_orig.R * rec.source_mean;

      current = rec.to_target_frame(last.transform.apply(nd.source + v_norm));
      total = t_orig.compose(total);
      out.normalization = rec;

      diag.iterations = last.iterations;
      diag.converged = last.converged;
      diag.sigma2 = last.sigma2;
      diag.matched_count = last.matched_count;
      diag.transform = t_orig;
      diag.log = last.diagnostics;
      captured = capture.messages();
    } catch (const StageError&) {
      throw;
    } catch (const NumericalError& e) {
      throw StageError(stage_no, e.what(), out.stages, true);
    } catch (const Error& e) {
      throw StageError(stage_no, e.what(), out.stages, false);
    }
    // Forward the stage's warnings to whoever was listening before.
    for (const auto& msg : captured) warn("stage " + std::to_string(stage_no) + ": " + msg);
    diag.warnings = std::move(captured);
    out.stages.push_back(std::move(diag));
  }

  RegistrationResult& r = out.result;
  r.deformed_domain = current;
  r.transform = total;
  r.displacement = total.apply_inverse(current) - source.points;
  r.nonoutlier_prob = last.nonoutlier_prob;
  r.sigma2 = last.sigma2;
  r.pi_diag = last.pi_diag;
  r.matched_count = last.nonoutlier_prob.sum();
  r.converged = last.converged;
  r.underflow_columns = underflow;
  for (const auto& st : out.stages) {
    r.iterations += st.iterations;
    r.diagnostics.insert(r.diagnostics.end(), st.log.begin(), st.log.end());
  }
  // Posterior variances and mixing weights live on the last stage's samples.
  if (last.displacement_var.size() == source.size()) {
    r.displacement_var = last.displacement_var;
    r.mixing_weights = last.mixing_weights;
  }
  out.total_displacement = current - source.points;
  return out;
}

}  // namespace det
