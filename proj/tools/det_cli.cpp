// det: register, evaluate and synthesize discretized functions.
#include "det/commands.hpp"
#include "det/io.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

void add_common(CLI::App* app, det::RunConfig& cfg, std::string& delimiter) {
  app->add_option("-o,--output-dir", cfg.output_dir, "Directory for output files");
  app->add_option("--delimiter", delimiter, "Output delimiter: comma or tab")
      ->check(CLI::IsMember({"comma", "tab"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain elastic transform: registration of discretized functions"};
  app.require_subcommand(1);
  det::RunConfig cfg;
  std::string delimiter = "comma";
  std::string frame = "original";
  std::map<std::string, std::string> params;

  auto* reg = app.add_subcommand("register", "Register a source function onto a target function");
  reg->add_option("--target", cfg.target, "Target function table")->required()->check(CLI::ExistingFile);
  reg->add_option("--source", cfg.source, "Source function table")->required()->check(CLI::ExistingFile);
  reg->add_option("--schedule", cfg.schedule, "Stage schedule config")->check(CLI::ExistingFile);
  reg->add_option("--preset", cfg.preset, "Built-in schedule when no config is given")
      ->check(CLI::IsMember({"single", "rigid_then_fine", "fine_only"}));
  reg->add_option("--seed", cfg.seed, "Random seed");
  reg->add_option("--frame", frame, "Output coordinates: original (target frame) or normalized")
      ->check(CLI::IsMember({"original", "normalized"}));
  reg->add_flag("--pre-aligned", cfg.pre_aligned, "Normalize the source with the target statistics");
  reg->add_flag("--timing", cfg.timing, "Record wall-clock times in the diagnostics log");
  reg->add_option("--jaccard-cell", cfg.jaccard_cell, "Voxel edge for the summary Jaccard index");
  for (const auto& name : det::param_names())
    reg->add_option_function<std::string>("--" + name, [&params, name](const std::string& v) { params[name] = v; },
                                          "Hyperparameter " + name + " (applied to every stage)");
  add_common(reg, cfg, delimiter);

  auto* eval = app.add_subcommand("evaluate", "Score a registered function against a target");
  eval->add_option("--registered", cfg.registered, "Registered (deformed) function table")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--target", cfg.target, "Target function table")->required()->check(CLI::ExistingFile);
  eval->add_option("--source", cfg.source, "Source before registration (enables the topology score)")
      ->check(CLI::ExistingFile);
  eval->add_option("--correspondence", cfg.correspondence, "Ground-truth source index per target row")
      ->check(CLI::ExistingFile);
  eval->add_option("--jaccard-cell", cfg.jaccard_cell, "Voxel edge for the Jaccard index");
  eval->add_option("--topology-k", cfg.topology_k, "Neighbors for the topology score");
  eval->add_option("--pcc-k", cfg.pcc_k, "Neighbors for the smoothed correlation");
  add_common(eval, cfg, delimiter);

  auto* synth = app.add_subcommand("synth", "Draw a synthetic function pair from the generative model");
  det::SynthConfig& sc = cfg.synth;
  std::vector<double> translation;
  synth->add_option("-M,--source-size", sc.source_size, "Source points");
  synth->add_option("-N,--target-size", sc.target_size, "Target points");
  synth->add_option("-D,--dim", sc.dim, "Domain dimension");
  synth->add_option("--feature-dim", sc.feature_dim, "Feature dimension");
  synth->add_option("--omega", sc.omega, "Outlier rate");
  synth->add_option("--lambda", sc.lambda, "Prior stiffness of the planted warp");
  synth->add_option("--beta", sc.beta, "Prior kernel width of the planted warp");
  synth->add_option("--noise", sc.noise, "Spatial noise std");
  synth->add_option("--feature-noise", sc.feature_noise, "Feature noise std");
  synth->add_option("--bumps", sc.bumps, "Gaussian bumps per feature");
  synth->add_option("--bump-width", sc.bump_width, "Gaussian bump width");
  synth->add_option("--rotation", sc.rotation, "Planted rotation (radians)");
  synth->add_option("--scale", sc.scale, "Planted scale");
  synth->add_option("--translation", translation, "Planted translation")->expected(1, 3);
  synth->add_option("--seed", sc.seed, "Random seed");
  add_common(synth, cfg, delimiter);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? det::kExitOk : det::kExitUsage;
  }

  cfg.delimiter = delimiter == "tab" ? '\t' : ',';
  cfg.frame = frame == "normalized" ? det::OutputFrame::normalized : det::OutputFrame::target_original;
  cfg.overrides = params;
  if (!translation.empty()) sc.translation = Eigen::Map<const det::Vector>(translation.data(), static_cast<det::Index>(translation.size()));

  if (reg->parsed()) return det::register_cmd(cfg, std::cerr);
  if (eval->parsed()) return det::evaluate_cmd(cfg, std::cout, std::cerr);
  return det::synth_cmd(cfg, std::cerr);
}
