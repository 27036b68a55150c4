#include "det/commands.hpp"
#include "det/io.hpp"
#include "det/metrics.hpp"
#include "det/synth.hpp"

#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace det;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("det_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Run {
  int code = -1;
  std::string err;
};

Run run_cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + DET_CLI_PATH + "\" " + args + " 2> \"" + err.string() + "\" > \"" +
                          (dir / "stdout.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  return r;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

DiscretizedFunction random_function(std::mt19937_64& rng, Index n, Index dim, Index fdim) {
  std::normal_distribution<double> normal;
  DiscretizedFunction f{Matrix(dim, n), Matrix(fdim, n)};
  for (Index i = 0; i < f.points.size(); ++i) f.points.data()[i] = normal(rng) * 1e3;
  for (Index i = 0; i < f.features.size(); ++i) f.features.data()[i] = std::exp(normal(rng) * 20.0);
  return f;
}

}  // namespace

TEST_CASE("function tables round trip at 17 significant digits") {
  const fs::path dir = scratch("roundtrip");
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 5; ++rep) {
    const DiscretizedFunction f = random_function(rng, 40, 1 + rep % 3, 1 + rep % 2);
    const char delim = rep % 2 ? '\t' : ',';
    save_function(dir / "f.csv", f, delim);
    const DiscretizedFunction back = load_function(dir / "f.csv");
    CHECK(back.points == f.points);
    CHECK(back.features == f.features);
    save_function(dir / "g.csv", back, delim);
    CHECK(read_file(dir / "f.csv") == read_file(dir / "g.csv"));
  }
}

TEST_CASE("table parsing") {
  const fs::path dir = scratch("parse");
  write_text(dir / "ok.csv", "x1,x2,f1\n0,0,1\n1,0,2\n0,1,3\n");
  const DiscretizedFunction ok = load_function(dir / "ok.csv");
  CHECK(ok.size() == 3);
  CHECK(ok.dim() == 2);
  CHECK(ok.feature_dim() == 1);
  CHECK(ok.features(0, 2) == 3.0);

  write_text(dir / "bad.csv", "x1,x2,f1\n0,0,1\n1,0,2\n0,1,3\n1,1,4\n2,2,5\n3,three,6\n");
  CHECK_THROWS_WITH_AS(load_function(dir / "bad.csv"), doctest::Contains(":7:"), DataError);
  write_text(dir / "ragged.csv", "x1,x2,f1\n0,0,1\n1,0\n");
  CHECK_THROWS_WITH_AS(load_function(dir / "ragged.csv"), doctest::Contains(":3:"), DataError);
  write_text(dir / "nan.csv", "x1,f1\n0,nan\n");
  CHECK_THROWS_AS(load_function(dir / "nan.csv"), DataError);
  write_text(dir / "inf.csv", "x1,f1\n0,1\ninf,2\n");
  CHECK_THROWS_AS(load_function(dir / "inf.csv"), DataError);
  write_text(dir / "header.csv", "x1,y,f1\n0,0,1\n");
  CHECK_THROWS_AS(load_function(dir / "header.csv"), DataError);
  CHECK_THROWS_AS(load_function(dir / "missing.csv"), DataError);
}

TEST_CASE("transform record round trip") {
  SimilarityTransform t = SimilarityTransform::identity(3);
  t.s = 0.1 + 1e-17;
  t.R << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  t.t << 1.0 / 3.0, -2e-300, 7e22;
  const SimilarityTransform back = parse_transform(format_transform(t));
  CHECK(back.s == t.s);
  CHECK(back.R == t.R);
  CHECK(back.t == t.t);
  CHECK_THROWS(parse_transform("s 1\nR 1 0\nt 0\n"));
}

TEST_CASE("hyperparameter names") {
  HyperParams p;
  for (const auto& name : param_names()) CHECK_NOTHROW(set_param(p, name, name == "max_iter" || name == "J" || name == "K" ||
                                                                             name == "M_prime" || name == "N_prime" ||
                                                                             name == "knn_k"
                                                                         ? "7"
                                                                         : "0.5"));
  CHECK(p.lambda == 0.5);
  CHECK(*p.g_rank == 7);
  set_param(p, "kappa", "inf");
  CHECK(std::isinf(p.kappa));
  set_param(p, "J", "none");
  CHECK_FALSE(p.p_rank.has_value());
  CHECK_THROWS(set_param(p, "nope", "1"));
  CHECK_THROWS(set_param(p, "lambda", "1x"));
}

TEST_CASE("register: identical inputs overlap exactly") {
  const fs::path dir = scratch("identical");
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DiscretizedFunction f{Matrix(2, 150), Matrix(1, 150)};
  for (Index i = 0; i < f.points.size(); ++i) f.points.data()[i] = unit(rng);
  for (Index i = 0; i < 150; ++i) f.features(0, i) = std::sin(5.0 * f.points(0, i)) + f.points(1, i);
  save_function(dir / "f.csv", f);

  const std::string base = "register --target " + (dir / "f.csv").string() + " --source " + (dir / "f.csv").string() +
                           " --omega 0 --radius_factor inf";
  Run r = run_cli(base + " -o " + (dir / "soft").string(), dir);
  REQUIRE(r.code == 0);
  nlohmann::json summary = nlohmann::json::parse(read_file(dir / "soft" / "summary.json"));
  CHECK(summary["jaccard"].get<double>() == 1.0);
  const DiscretizedFunction deformed = load_function(dir / "soft" / "deformed.csv");
  CHECK((deformed.points - f.points).cwiseAbs().maxCoeff() < 1e-3);

  // A stiff prior removes the scale/displacement ambiguity of an exact copy.
  r = run_cli(base + " --lambda 1e5 -o " + (dir / "stiff").string(), dir);
  REQUIRE(r.code == 0);
  summary = nlohmann::json::parse(read_file(dir / "stiff" / "summary.json"));
  CHECK(summary["jaccard"].get<double>() == 1.0);
  CHECK(summary["displacement_inf_norm"].get<double>() < 1e-3);

  // evaluate agrees
  r = run_cli("evaluate --registered " + (dir / "soft" / "deformed.csv").string() + " --target " +
                  (dir / "f.csv").string() + " -o " + (dir / "eval").string(),
              dir);
  REQUIRE(r.code == 0);
  CHECK(read_file(dir / "eval" / "metrics.txt").find("jaccard=1\n") != std::string::npos);
}

TEST_CASE("register: output files are consistent and deterministic") {
  const fs::path dir = scratch("outputs");
  SynthConfig c;
  c.source_size = 300;
  c.target_size = 280;
  c.lambda = 50.0;
  c.rotation = 0.4;
  c.scale = 1.3;
  c.translation = Vector::Constant(2, 2.0);
  c.seed = 9;
  const SynthResult data = synthesize(c);
  save_function(dir / "src.csv", data.source);
  save_function(dir / "tgt.csv", data.target);
  const std::string base = "register --target " + (dir / "tgt.csv").string() + " --source " +
                           (dir / "src.csv").string() + " --preset rigid_then_fine --M_prime 200 --N_prime 200 --J 100 --seed 77";
  REQUIRE(run_cli(base + " -o " + (dir / "a").string(), dir).code == 0);
  REQUIRE(run_cli(base + " -o " + (dir / "b").string(), dir).code == 0);
  for (const char* name : {"deformed.csv", "displacement.csv", "nonoutlier.csv", "transform.txt", "diagnostics.log",
                           "summary.json"})
    CHECK(read_file(dir / "a" / name) == read_file(dir / "b" / name));

  // Transform and displacement reproduce the deformed domain.
  const SimilarityTransform t = parse_transform(read_file(dir / "a" / "transform.txt"));
  const Table v = read_table(dir / "a" / "displacement.csv");
  const DiscretizedFunction deformed = load_function(dir / "a" / "deformed.csv");
  CHECK((t.apply(data.source.points + v.values) - deformed.points).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(deformed.features == data.source.features);
  CHECK(read_table(dir / "a" / "nonoutlier.csv").values.cols() == 280);

  // The preset appears verbatim in the log header.
  const std::string log = read_file(dir / "a" / "diagnostics.log");
  StageSchedule preset = default_schedule(SchedulePreset::rigid_then_fine);
  for (auto& st : preset.stages) {
    set_param(st.params, "M_prime", "200");
    set_param(st.params, "N_prime", "200");
    set_param(st.params, "J", "100");
  }
  std::istringstream lines(serialize_schedule(preset));
  std::string line;
  while (std::getline(lines, line)) CHECK(log.find("# " + line + "\n") != std::string::npos);
  CHECK(log.find("# seed 77\n") != std::string::npos);
  CHECK(log.find("stage\titer\tsigma2\tn_hat\telbo\twall_ms\n") != std::string::npos);

  const nlohmann::json summary = nlohmann::json::parse(read_file(dir / "a" / "summary.json"));
  CHECK(summary["stages"].size() == 2);
  CHECK(summary["seed"].get<std::uint64_t>() == 77);

  // Normalized frame output differs from the target frame by the normalization.
  REQUIRE(run_cli(base + " --frame normalized -o " + (dir / "n").string(), dir).code == 0);
  const DiscretizedFunction norm = load_function(dir / "n" / "deformed.csv");
  const NormalizedDomains nd = normalize_domains(data.target.points, data.source.points, false);
  CHECK((nd.record.from_target_frame(deformed.points) - norm.points).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("register: usage and data errors") {
  const fs::path dir = scratch("errors");
  write_text(dir / "f.csv", "x1,x2,f1\n0,0,1\n1,0,2\n0,1,3\n1,1,4\n");
  Run r = run_cli("register --source " + (dir / "f.csv").string(), dir);
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("--target") != std::string::npos);
  r = run_cli("evaluate --registered " + (dir / "f.csv").string(), dir);
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("--target") != std::string::npos);
  r = run_cli("register --target " + (dir / "f.csv").string() + " --source " + (dir / "f.csv").string() +
                  " --omega 2 -o " + (dir / "o").string(),
              dir);
  CHECK(r.code == kExitUsage);
  write_text(dir / "bad.csv", "x1,x2,f1\n0,0,1\n1,zero,2\n");
  r = run_cli("register --target " + (dir / "bad.csv").string() + " --source " + (dir / "f.csv").string() + " -o " +
                  (dir / "o").string(),
              dir);
  CHECK(r.code == kExitData);
  CHECK(r.err.find(":3:") != std::string::npos);
  r = run_cli("register --target " + (dir / "f.csv").string() + " --source " + (dir / "f.csv").string() +
                  " --lambda 1e9 -o " + (dir / "o").string(),
              dir);
  CHECK(r.err.find("lambda") != std::string::npos);
}

TEST_CASE("synth: outlier law and evaluate residual") {
  const fs::path dir = scratch("synth");
  REQUIRE(run_cli("synth -M 200 -N 300 --omega 0 --lambda 50 --seed 3 -o " + (dir / "clean").string(), dir).code == 0);
  const Table clean = read_table(dir / "clean" / "correspondence.csv");
  CHECK(clean.values.cols() == 300);
  CHECK(clean.values.minCoeff() >= 0.0);
  CHECK(clean.values.maxCoeff() <= 199.0);

  REQUIRE(run_cli("synth -M 200 -N 300 --omega 1 --seed 3 -o " + (dir / "noise").string(), dir).code == 0);
  CHECK(read_table(dir / "noise" / "correspondence.csv").values.maxCoeff() == -1.0);

  // 10^4 target draws in two batches (each run is capped at 5000 rows)
  double outliers = 0;
  for (std::uint64_t seed : {5, 6}) {
    SynthConfig c;
    c.source_size = 100;
    c.target_size = 5000;
    c.omega = 0.3;
    c.seed = seed;
    for (Index idx : synthesize(c).correspondence) outliers += idx < 0 ? 1.0 : 0.0;
  }
  CHECK(std::abs(outliers - 3000.0) < 3.0 * std::sqrt(10000.0 * 0.3 * 0.7));

  const Run big = run_cli("synth -M 6000 -o " + (dir / "big").string(), dir);
  CHECK(big.code != 0);
  CHECK(big.err.find("5000") != std::string::npos);

  // evaluate with ground truth equals a direct computation
  const fs::path clean_dir = dir / "clean";
  REQUIRE(run_cli("evaluate --registered " + (clean_dir / "source.csv").string() + " --target " +
                      (clean_dir / "target.csv").string() + " --correspondence " +
                      (clean_dir / "correspondence.csv").string() + " -o " + (dir / "eval").string(),
                  dir)
              .code == 0);
  const DiscretizedFunction src = load_function(clean_dir / "source.csv");
  const DiscretizedFunction tgt = load_function(clean_dir / "target.csv");
  double sum = 0.0;
  for (Index n = 0; n < clean.values.cols(); ++n)
    sum += (src.points.col(static_cast<Index>(clean.values(0, n))) - tgt.points.col(n)).norm();
  const double want = sum / static_cast<double>(clean.values.cols());
  const std::string text = read_file(dir / "eval" / "metrics.txt");
  const auto pos = text.find("mean_gt_residual=");
  REQUIRE(pos != std::string::npos);
  CHECK(std::abs(std::stod(text.substr(pos + 17)) - want) < 1e-12);
  CHECK(read_file(dir / "stdout.txt") == text);
}
