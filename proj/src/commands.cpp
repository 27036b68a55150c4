#include "det/commands.hpp"

#include "det/io.hpp"
#include "det/metrics.hpp"
#include "det/pipeline.hpp"

#include <json.hpp>

#include <cmath>

namespace det {

namespace {

class WarningsTo {
 public:
  explicit WarningsTo(std::ostream& err)
      : previous_(set_warning_handler([&err](const std::string& m) { err << "warning: " << m << "\n"; })) {}
  ~WarningsTo() { set_warning_handler(previous_); }
  WarningsTo(const WarningsTo&) = delete;
  WarningsTo& operator=(const WarningsTo&) = delete;

 private:
  WarningHandler previous_;
};

StageSchedule build_schedule(const RunConfig& cfg) {
  StageSchedule schedule;
  if (!cfg.schedule.empty()) {
    schedule = parse_schedule(read_file(cfg.schedule));
  } else if (cfg.preset == "single") {
    schedule.stages.emplace_back();
  } else if (cfg.preset == "rigid_then_fine") {
    schedule = default_schedule(SchedulePreset::rigid_then_fine);
  } else if (cfg.preset == "fine_only") {
    schedule = default_schedule(SchedulePreset::fine_only);
  } else {
    throw ParameterError("unknown preset '" + cfg.preset + "' (single, rigid_then_fine, fine_only)");
  }
  for (auto& stage : schedule.stages)
    for (const auto& [key, value] : cfg.overrides) set_param(stage.params, key, value);
  return schedule;
}

nlohmann::json transform_json(const SimilarityTransform& t) {
  nlohmann::json j;
  j["s"] = t.s;
  std::vector<double> r, tt;
  for (Index i = 0; i < t.R.rows(); ++i)
    for (Index k = 0; k < t.R.cols(); ++k) r.push_back(t.R(i, k));
  for (Index i = 0; i < t.t.size(); ++i) tt.push_back(t.t(i));
  j["R"] = r;
  j["t"] = tt;
  return j;
}

std::string diagnostics_log(const StageSchedule& schedule, const HierarchicalResult& res, const RunConfig& cfg) {
  std::string out = "# schedule\n";
  std::string body = serialize_schedule(schedule);
  std::size_t start = 0;
  while (start < body.size()) {
    const auto end = body.find('\n', start);
    out += "# " + body.substr(start, end - start) + "\n";
    start = end + 1;
  }
  out += "# seed " + std::to_string(cfg.seed) + "\n";
  out += "stage\titer\tsigma2\tn_hat\telbo\twall_ms\n";
  for (const auto& st : res.stages) {
    for (const auto& rec : st.log) {
      out += std::to_string(st.stage) + "\t" + std::to_string(rec.iteration) + "\t" + format_double(rec.sigma2) +
             "\t" + format_double(rec.n_hat) + "\t" + (rec.elbo ? format_double(*rec.elbo) : "NA") + "\t" +
             (cfg.timing ? format_double(rec.wall_ms) : "NA") + "\n";
    }
  }
  return out;
}

int report(std::ostream& err, const char* what, int code, const std::string& message) {
  err << "error (" << what << "): " << message << "\n";
  return code;
}

}  // namespace

int register_cmd(const RunConfig& cfg, std::ostream& err) {
  WarningsTo route(err);
  StageSchedule schedule;
  try {
    if (cfg.target.empty()) throw ParameterError("--target is required");
    if (cfg.source.empty()) throw ParameterError("--source is required");
    schedule = build_schedule(cfg);
    schedule.validate();
    for (std::size_t l = 0; l < schedule.stages.size(); ++l)
      for (const auto& msg : schedule.stages[l].params.range_warnings())
        warn("stage " + std::to_string(l + 1) + ": " + msg);
  } catch (const DataError& e) {
    return report(err, "schedule", kExitData, e.what());
  } catch (const Error& e) {
    return report(err, "usage", kExitUsage, e.what());
  }

  try {
    const DiscretizedFunction target = load_function(cfg.target);
    const DiscretizedFunction source = load_function(cfg.source);
    PipelineOptions options;
    options.pre_aligned = cfg.pre_aligned;
    const HierarchicalResult res = hierarchical_register(target, source, schedule, cfg.seed, options);
    const RegistrationResult& r = res.result;

    Matrix deformed = r.deformed_domain;
    SimilarityTransform transform = r.transform;
    if (cfg.frame == OutputFrame::normalized) {
      const NormalizationRecord& rec = res.normalization;
      deformed = rec.from_target_frame(deformed);
      transform.s /= rec.target_scale;
      transform.t = (transform.t - rec.target_mean) / rec.target_scale;
    }

    std::filesystem::create_directories(cfg.output_dir);
    const auto& dir = cfg.output_dir;
    save_function(dir / "deformed.csv", DiscretizedFunction{deformed, source.features}, cfg.delimiter);
    Table disp;
    for (Index d = 0; d < r.displacement.rows(); ++d) disp.header.push_back("v" + std::to_string(d + 1));
    disp.values = r.displacement;
    write_table(dir / "displacement.csv", disp, cfg.delimiter);
    Table nu{{"nu_prime"}, r.nonoutlier_prob.transpose()};
    write_table(dir / "nonoutlier.csv", nu, cfg.delimiter);
    write_file_atomic(dir / "transform.txt", format_transform(transform));
    write_file_atomic(dir / "diagnostics.log", diagnostics_log(schedule, res, cfg));

    const double cell = cfg.jaccard_cell ? *cfg.jaccard_cell : bounding_box_diameter(target.points) / 100.0;
    nlohmann::json summary;
    summary["seed"] = cfg.seed;
    summary["frame"] = cfg.frame == OutputFrame::normalized ? "normalized" : "target-original";
    summary["converged"] = r.converged;
    summary["iterations"] = r.iterations;
    summary["sigma2"] = r.sigma2;
    summary["matched_count"] = r.matched_count;
    summary["jaccard"] = jaccard_index(r.deformed_domain, target.points, cell);
    summary["jaccard_cell_size"] = cell;
    summary["displacement_inf_norm"] = r.displacement.size() ? r.displacement.cwiseAbs().maxCoeff() : 0.0;
    summary["transform"] = transform_json(transform);
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : res.stages) {
      stages.push_back({{"stage", st.stage},
                        {"mode", st.mode == StageMode::rigid ? "rigid" : "nonrigid"},
                        {"iterations", st.iterations},
                        {"converged", st.converged},
                        {"sigma2", st.sigma2},
                        {"matched_count", st.matched_count},
                        {"source_samples", st.source_samples},
                        {"target_samples", st.target_samples}});
    }
    summary["stages"] = stages;
    write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    return kExitOk;
  } catch (const StageError& e) {
    return report(err, "registration", e.numerical() ? kExitNumerical : kExitData, e.what());
  } catch (const NumericalError& e) {
    return report(err, "numerical", kExitNumerical, e.what());
  } catch (const Error& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report(err, "data", kExitData, e.what());
  }
}

int evaluate_cmd(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  WarningsTo route(err);
  if (cfg.registered.empty()) return report(err, "usage", kExitUsage, "--registered is required");
  if (cfg.target.empty()) return report(err, "usage", kExitUsage, "--target is required");
  try {
    const DiscretizedFunction reg = load_function(cfg.registered);
    const DiscretizedFunction target = load_function(cfg.target);
    MetricReport metrics;
    const double cell = cfg.jaccard_cell ? *cfg.jaccard_cell : bounding_box_diameter(target.points) / 100.0;
    metrics.jaccard = jaccard_index(reg.points, target.points, cell);
    if (!cfg.source.empty()) {
      const DiscretizedFunction before = load_function(cfg.source);
      if (before.size() != reg.size()) throw DataError("--source and --registered differ in point count");
      if (reg.size() > cfg.topology_k) metrics.topology_score = topology_score(before.points, reg.points, cfg.topology_k);
    }
    if (reg.feature_dim() == target.feature_dim())
      metrics.smoothed_pcc = smoothed_pcc(reg.features, target.features, reg.points, target.points, cfg.pcc_k);
    if (!cfg.correspondence.empty()) {
      const Table corr = read_table(cfg.correspondence);
      if (corr.values.rows() != 1) throw DataError(cfg.correspondence.string() + ": expected a single column");
      std::vector<Index> idx(static_cast<std::size_t>(corr.values.cols()));
      for (Index i = 0; i < corr.values.cols(); ++i) idx[static_cast<std::size_t>(i)] = static_cast<Index>(corr.values(0, i));
      metrics.mean_gt_residual = mean_gt_residual(reg.points, target.points, idx);
    }
    const std::string text = metrics.to_text();
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(cfg.output_dir / "metrics.txt", text);
    out << text;
    return kExitOk;
  } catch (const NumericalError& e) {
    return report(err, "numerical", kExitNumerical, e.what());
  } catch (const Error& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report(err, "data", kExitData, e.what());
  }
}

int synth_cmd(const RunConfig& cfg, std::ostream& err) {
  WarningsTo route(err);
  SynthResult res;
  try {
    res = synthesize(cfg.synth);
  } catch (const ParameterError& e) {
    return report(err, "usage", kExitUsage, e.what());
  } catch (const NumericalError& e) {
    return report(err, "numerical", kExitNumerical, e.what());
  }
  try {
    std::filesystem::create_directories(cfg.output_dir);
    const auto& dir = cfg.output_dir;
    save_function(dir / "source.csv", res.source, cfg.delimiter);
    save_function(dir / "target.csv", res.target, cfg.delimiter);
    Table corr{{"source_index"}, Matrix(1, static_cast<Index>(res.correspondence.size()))};
    for (std::size_t i = 0; i < res.correspondence.size(); ++i)
      corr.values(0, static_cast<Index>(i)) = static_cast<double>(res.correspondence[i]);
    write_table(dir / "correspondence.csv", corr, cfg.delimiter);
    Table disp;
    for (Index d = 0; d < res.displacement.rows(); ++d) disp.header.push_back("v" + std::to_string(d + 1));
    disp.values = res.displacement;
    write_table(dir / "displacement_truth.csv", disp, cfg.delimiter);
    write_file_atomic(dir / "transform_truth.txt", format_transform(res.transform));
    return kExitOk;
  } catch (const Error& e) {
    return report(err, "data", kExitData, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report(err, "data", kExitData, e.what());
  }
}

}  // namespace det
