// combat: run / evaluate / oracle / plot
//
// Exit codes: 0 success, 1 config error, 2 runtime failure, 3 strict oracle failure.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "combat/checkpoint.hpp"
#include "combat/config.hpp"
#include "combat/harness.hpp"
#include "combat/plot.hpp"

namespace {

using namespace combat;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kOracleFailure = 3;

int cmd_run(const std::string& config_path, const harness::Overrides& ov, std::string out)
{
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  harness::apply_overrides(cfg, ov);
  if (out.empty())
    out = "runs/" + harness::to_string(cfg.algorithm) + "-" + cfg.case_name + "-" + harness::to_string(cfg.profile);
  std::cerr << "run " << harness::to_string(cfg.algorithm) << " " << cfg.case_name << " "
            << harness::to_string(cfg.profile) << ", " << cfg.seeds.size() << " seed(s), budget "
            << cfg.episode_budget() << " -> " << out << "\n";
  harness::RunOutcome res = harness::run(cfg, out, &std::cerr);
  const auto& s = res.summary;
  std::cout << "run directory: " << res.dir.string() << "\n";
  std::cout << "converged seeds: " << s["converged_seeds"] << " / " << cfg.seeds.size() << "\n";
  std::cout << "median episodes to threshold: " << s["episodes_to_threshold"]["median"] << " (95% CI "
            << s["episodes_to_threshold"]["ci95"] << ")\n";
  std::cout << "median modeled minutes to threshold: " << s["minutes_to_threshold"]["median"] << "\n";
  std::cout << "best reward: " << s["best_reward"] << "\n";
  if (!res.ok()) {
    for (const auto& e : res.errors) std::cerr << "error: " << e << "\n";
    return kRuntimeError;
  }
  return kOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& config_path, int episodes)
{
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  nn::Checkpoint ckpt;
  try {
    ckpt = nn::load_checkpoint(ckpt_path);
  } catch (const std::exception& e) {
    throw harness::RunError(std::string("checkpoint mismatch: ") + e.what());
  }
  harness::EvalResult r = harness::evaluate(ckpt, cfg, episodes);
  std::cout << "checkpoint: " << ckpt_path << " (" << r.kind << ", case " << r.case_name << ")\n";
  std::cout << "rewards:";
  for (int x : r.rewards) std::cout << ' ' << x;
  std::cout << "\nresting areas:";
  for (int a : r.resting_areas) std::cout << ' ' << a;
  std::cout << "\nmean " << harness::format_fixed(r.mean, 3) << " stddev " << harness::format_fixed(r.stddev, 3) << "\n";
  return kOk;
}

int cmd_oracle(const std::string& config_path, bool strict)
{
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  auto map = harness::load_config_map(cfg);
  harness::validate(cfg, *map);
  const harness::OracleReport rep = harness::oracle_report(cfg, *map);
  std::cout << harness::format_report(rep);
  if (strict && !rep.admits_optimum()) {
    std::cerr << "oracle: some scenario has no optimal area\n";
    return kOracleFailure;
  }
  return kOk;
}

int cmd_plot(const std::vector<std::string>& runs, const std::string& out)
{
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const plot::Curves curves = plot::load_curves(dirs);
  for (const auto& w : curves.warnings) std::cerr << "warning: " << w << "\n";
  fs::path svg(out);
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  fs::path csv = svg;
  csv.replace_extension(".csv");
  std::ofstream(svg) << plot::curves_svg(curves);
  std::ofstream(csv) << plot::curves_csv(curves);
  if (!fs::exists(svg) || !fs::exists(csv)) throw harness::RunError("cannot write '" + out + "'");
  std::cout << "wrote " << svg.string() << " and " << csv.string() << "\n";
  return kOk;
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"multi-robot positioning benchmark: Deep PILCO vs deep Q-learning"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, algo, case_name, profile, seeds;
  int episodes = 0;
  int eval_episodes = 10;
  bool strict = false;
  std::vector<std::string> runs;

  CLI::App* run = app.add_subcommand("run", "train over seeds and write a run directory");
  run->add_option("--config", config, "experiment config (JSON)")->required();
  run->add_option("--algo", algo, "pilco | dql");
  run->add_option("--case", case_name, "scenario name, e.g. 1v1 | 1v2");
  run->add_option("--profile", profile, "sim | real");
  run->add_option("--seeds", seeds, "comma-separated seeds, e.g. 1,2,3");
  run->add_option("--episodes", episodes, "episode budget per seed");
  run->add_option("--out", out, "run directory (must not exist or be empty)");

  CLI::App* eval = app.add_subcommand("evaluate", "greedy test episodes of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "policy.ckpt or qnet.ckpt")->required();
  eval->add_option("--config", config, "experiment config (JSON)")->required();
  eval->add_option("--episodes", eval_episodes, "number of test episodes");

  CLI::App* oracle = app.add_subcommand("oracle", "brute-force optimal areas for every scenario");
  oracle->add_option("--config", config, "experiment config (JSON)")->required();
  oracle->add_flag("--strict", strict, "exit 3 when a scenario has no optimal area");

  CLI::App* plt = app.add_subcommand("plot", "learning curves across seeds as SVG + CSV");
  plt->add_option("--runs", runs, "run directories")->required();
  plt->add_option("--out", out, "output .svg path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) {
      harness::Overrides ov;
      if (!algo.empty()) ov.algorithm = algo;
      if (!case_name.empty()) ov.case_name = case_name;
      if (!profile.empty()) ov.profile = profile;
      if (run->count("--seeds")) ov.seeds = seeds;
      if (run->count("--episodes")) ov.episodes = episodes;
      return cmd_run(config, ov, out);
    }
    if (*eval) return cmd_evaluate(checkpoint, config, eval_episodes);
    if (*oracle) return cmd_oracle(config, strict);
    if (*plt) return cmd_plot(runs, out);
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
