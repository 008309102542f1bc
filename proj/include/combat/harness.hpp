#pragma once

// Seeded multi-run execution, per-seed CSV logs, summary statistics and the
// evaluate / oracle reports used by the command-line tool.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "combat/arena.hpp"
#include "combat/checkpoint.hpp"
#include "combat/config.hpp"
#include "combat/dql.hpp"
#include "combat/episode_log.hpp"
#include "combat/pilco.hpp"

namespace combat::harness {

inline constexpr const char* kCsvHeader = "episode,iter_rewards,episodic_reward,compute_s,modeled_wall_s";

class RunError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::string format_fixed(double v, int digits = 6)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// One CSV row. compute_s holds the compute charged to the episode (override
// or measured); modeled_wall_s is that episode's modeled duration.
inline std::string csv_row(const EpisodeLog& log, double compute_charged)
{
  std::string iters;
  for (std::size_t i = 0; i < log.iteration_rewards.size(); ++i) {
    if (i) iters += ';';
    iters += std::to_string(log.iteration_rewards[i]);
  }
  return std::to_string(log.episode) + "," + iters + "," + std::to_string(log.episodic_reward) + "," +
         format_fixed(compute_charged) + "," + format_fixed(log.modeled_wall_seconds);
}

struct CsvEpisode {
  int episode = 0;
  std::vector<int> iteration_rewards;
  int episodic_reward = 0;
  double compute_s = 0.0;
  double modeled_wall_s = 0.0;
};

inline std::vector<CsvEpisode> read_episodes_csv(const fs::path& path)
{
  std::ifstream in(path);
  if (!in) throw RunError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw RunError("'" + path.string() + "': unexpected header");
  std::vector<CsvEpisode> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw RunError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      CsvEpisode e;
      e.episode = std::stoi(f[0]);
      std::stringstream it(f[1]);
      while (std::getline(it, cell, ';')) e.iteration_rewards.push_back(std::stoi(cell));
      e.episodic_reward = std::stoi(f[2]);
      e.compute_s = std::stod(f[3]);
      e.modeled_wall_s = std::stod(f[4]);
      out.push_back(std::move(e));
    } catch (const std::exception&) {
      throw RunError("'" + path.string() + "' line " + std::to_string(lineno) + ": malformed field");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

// Median treating nullopt as +infinity; nullopt if the median itself is infinite.
inline std::optional<double> median_of(std::vector<std::optional<double>> xs)
{
  if (xs.empty()) return std::nullopt;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> v;
  for (const auto& x : xs) v.push_back(x ? *x : inf);
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double m = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  if (std::isinf(m)) return std::nullopt;
  return m;
}

// Distribution-free confidence interval for the median from order statistics:
// the widest symmetric pair (x_(k), x_(n+1-k)) with P(Bin(n, 1/2) < k) <= alpha/2.
// Falls back to (min, max) when n is too small for the nominal level.
inline std::pair<std::optional<double>, std::optional<double>>
median_ci(std::vector<std::optional<double>> xs, double alpha = 0.05)
{
  if (xs.empty()) return {std::nullopt, std::nullopt};
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> v;
  for (const auto& x : xs) v.push_back(x ? *x : inf);
  std::sort(v.begin(), v.end());
  const int n = static_cast<int>(v.size());
  int k = 1;
  double cdf = 0.0;
  double pmf = std::pow(0.5, n);
  for (int j = 0; j < n / 2; ++j) {
    cdf += pmf;
    pmf = pmf * (n - j) / (j + 1);
    if (cdf <= alpha / 2.0) k = j + 1;
    else break;
  }
  auto at = [&](int i) -> std::optional<double> {
    const double x = v[static_cast<std::size_t>(i - 1)];
    if (std::isinf(x)) return std::nullopt;
    return x;
  };
  return {at(k), at(n + 1 - k)};
}

inline json opt_json(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

// ---------------------------------------------------------------------------
// Summary

struct SeedRecord {
  std::uint64_t seed = 0;
  std::vector<CsvEpisode> episodes;
  std::vector<CsvEpisode> random_rollouts;
  std::optional<std::string> error;
};

inline std::vector<double> episodic_rewards(const std::vector<CsvEpisode>& eps)
{
  std::vector<double> r;
  for (const auto& e : eps) r.push_back(e.episodic_reward);
  return r;
}

// Statistics are computed only from what the CSVs hold, so the summary can be
// regenerated from a run directory at any time.
inline json summarize(const ExperimentConfig& cfg, const std::vector<SeedRecord>& seeds)
{
  json per_seed = json::array();
  std::vector<std::optional<double>> episodes_to, minutes_to, episodes_to_incl;
  int best = std::numeric_limits<int>::min();
  int converged = 0;
  for (const SeedRecord& s : seeds) {
    json row;
    row["seed"] = s.seed;
    row["episodes_run"] = s.episodes.size();
    row["random_rollouts"] = s.random_rollouts.size();
    const auto idx = detect_convergence(episodic_rewards(s.episodes), cfg.threshold, cfg.patience);
    std::optional<double> eps, mins, incl;
    if (idx) {
      ++converged;
      eps = static_cast<double>(*idx + 1);
      incl = *eps + static_cast<double>(s.random_rollouts.size());
      double secs = 0.0;
      for (const auto& r : s.random_rollouts) secs += r.modeled_wall_s;
      for (std::size_t i = 0; i <= *idx; ++i) secs += s.episodes[i].modeled_wall_s;
      mins = secs / 60.0;
    }
    row["convergence_index"] = idx ? json(*idx) : json(nullptr);
    row["episodes_to_threshold"] = opt_json(eps);
    row["episodes_to_threshold_incl_random"] = opt_json(incl);
    row["minutes_to_threshold"] = opt_json(mins);
    int seed_best = std::numeric_limits<int>::min();
    for (const auto& e : s.episodes) seed_best = std::max(seed_best, e.episodic_reward);
    row["best_reward"] = s.episodes.empty() ? json(nullptr) : json(seed_best);
    row["final_reward"] = s.episodes.empty() ? json(nullptr) : json(s.episodes.back().episodic_reward);
    row["error"] = s.error ? json(*s.error) : json(nullptr);
    if (!s.episodes.empty()) best = std::max(best, seed_best);
    if (!s.error) {
      episodes_to.push_back(eps);
      minutes_to.push_back(mins);
      episodes_to_incl.push_back(incl);
    }
    per_seed.push_back(row);
  }
  auto stat = [](const std::vector<std::optional<double>>& xs) {
    const auto ci = median_ci(xs);
    return json{{"median", opt_json(median_of(xs))}, {"ci95", {opt_json(ci.first), opt_json(ci.second)}}};
  };
  json out;
  out["algorithm"] = to_string(cfg.algorithm);
  out["case"] = cfg.case_name;
  out["profile"] = to_string(cfg.profile);
  out["seeds"] = cfg.seeds;
  out["episode_budget"] = cfg.episode_budget();
  out["threshold"] = cfg.threshold;
  out["patience"] = cfg.patience;
  out["converged_seeds"] = converged;
  out["episodes_to_threshold"] = stat(episodes_to);
  out["episodes_to_threshold_incl_random"] = stat(episodes_to_incl);
  out["minutes_to_threshold"] = stat(minutes_to);
  out["best_reward"] = best == std::numeric_limits<int>::min() ? json(nullptr) : json(best);
  out["per_seed"] = per_seed;
  return out;
}

inline fs::path seed_dir(const fs::path& run_dir, std::uint64_t seed) { return run_dir / ("seed_" + std::to_string(seed)); }

inline std::vector<SeedRecord> read_run_records(const fs::path& run_dir, const ExperimentConfig& cfg)
{
  std::vector<SeedRecord> out;
  for (std::uint64_t seed : cfg.seeds) {
    SeedRecord r;
    r.seed = seed;
    const fs::path d = seed_dir(run_dir, seed);
    if (fs::exists(d / "episodes.csv")) r.episodes = read_episodes_csv(d / "episodes.csv");
    if (fs::exists(d / "random_rollouts.csv")) r.random_rollouts = read_episodes_csv(d / "random_rollouts.csv");
    if (fs::exists(d / "ERROR")) {
      std::ifstream in(d / "ERROR");
      std::stringstream ss;
      ss << in.rdbuf();
      r.error = ss.str();
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// run

struct RunOutcome {
  fs::path dir;
  json summary;
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};

namespace detail {

class CsvWriter {
public:
  explicit CsvWriter(const fs::path& path) : out_(path)
  {
    if (!out_) throw RunError("cannot write '" + path.string() + "'");
    out_ << kCsvHeader << '\n';
    out_.flush();
  }
  void write(const std::string& row)
  {
    out_ << row << '\n';
    out_.flush();
  }

private:
  std::ofstream out_;
};

inline void write_text(const fs::path& path, const std::string& text)
{
  std::ofstream out(path);
  if (!out) throw RunError("cannot write '" + path.string() + "'");
  out << text;
}

// Trains one seed, streaming rows so that a failure leaves partial logs.
inline void run_seed(const ExperimentConfig& cfg, std::shared_ptr<const arena::ArenaMap> map, std::uint64_t seed,
                     const fs::path& dir)
{
  fs::create_directories(dir);
  const WalltimeModel wall = cfg.walltime();
  arena::Environment env(map, cfg.env_config(derive_seed(seed, 20)));
  arena::StateCodec codec(map, cfg.n_enemies());

  CsvWriter episodes(dir / "episodes.csv");
  std::ofstream timing(dir / "timing.csv");
  timing << "episode,measured_compute_s\n";

  auto record = [&](EpisodeLog log) {
    log.modeled_wall_seconds = wall.episode_seconds(cfg.horizon, cfg.profile, log.compute_seconds);
    episodes.write(csv_row(log, wall.compute_charged(log.compute_seconds)));
    timing << log.episode << ',' << format_fixed(log.compute_seconds) << '\n';
    timing.flush();
  };

  if (cfg.algorithm == Algorithm::Pilco) {
    pilco::TrainResult res = pilco::train(env, codec, cfg.resolved_pilco(), seed, record);
    // Random-action episodes: execution time only, nothing learned.
    CsvWriter random(dir / "random_rollouts.csv");
    int i = 0;
    for (EpisodeLog log : res.random_logs) {
      log.episode = ++i;
      log.modeled_wall_seconds = cfg.exec_seconds_per_iter * cfg.horizon / wall.speedup(cfg.profile);
      random.write(csv_row(log, 0.0));
    }
    nn::save_checkpoint((dir / "policy.ckpt").string(), res.policy.to_checkpoint());
    nn::save_checkpoint((dir / "dynamics.ckpt").string(), res.model.to_checkpoint());
  } else {
    dql::TrainResult res = dql::train(env, codec, cfg.resolved_dql(), seed, record);
    nn::Checkpoint ckpt{"qnet", res.qnet, {}};
    nn::save_checkpoint((dir / "qnet.ckpt").string(), ckpt);
  }
}

} // namespace detail

// Checks that summary.json matches what the CSVs on disk imply.
inline void verify_run(const fs::path& run_dir, const ExperimentConfig& cfg)
{
  const json recomputed = summarize(cfg, read_run_records(run_dir, cfg));
  const json on_disk = read_json_file(run_dir / "summary.json");
  if (recomputed != on_disk) throw RunError("summary.json does not match the episode logs in " + run_dir.string());
}

// Executes every seed on its own worker thread (bounded by the hardware
// concurrency) and aggregates after all workers have joined. The run
// directory must not already hold results.
inline RunOutcome run(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream* progress = nullptr)
{
  auto map = load_config_map(cfg);
  validate(cfg, *map);
  if (fs::exists(out_dir) && !fs::is_empty(out_dir))
    throw ConfigError("out: run directory '" + out_dir.string() + "' already exists and is not empty");
  fs::create_directories(out_dir);
  detail::write_text(out_dir / "config.json", to_json(cfg).dump(2) + "\n");

  const std::size_t n = cfg.seeds.size();
  std::vector<std::optional<std::string>> errors(n);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const std::uint64_t seed = cfg.seeds[i];
      const fs::path dir = seed_dir(out_dir, seed);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        detail::run_seed(cfg, map, seed, dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
        try {
          detail::write_text(dir / "ERROR", std::string(e.what()) + "\n");
        } catch (...) {
        }
      }
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mutex);
        *progress << "seed " << seed << (errors[i] ? " failed: " + *errors[i] : " done") << " ("
                  << format_fixed(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1)
                  << " s)\n";
      }
    }
  };
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(n, hw); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  RunOutcome out;
  out.dir = out_dir;
  for (std::size_t i = 0; i < n; ++i)
    if (errors[i]) out.errors.push_back("seed " + std::to_string(cfg.seeds[i]) + ": " + *errors[i]);
  out.summary = summarize(cfg, read_run_records(out_dir, cfg));
  detail::write_text(out_dir / "summary.json", out.summary.dump(2) + "\n");
  if (!out.errors.empty()) {
    std::string msg;
    for (const auto& e : out.errors) msg += e + "\n";
    detail::write_text(out_dir / "ERROR", msg);
  }
  verify_run(out_dir, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalResult {
  std::string kind;
  std::string case_name;
  std::vector<int> rewards;
  std::vector<arena::AreaId> resting_areas;
  double mean = 0.0;
  double stddev = 0.0;
};

// Greedy execution of a checkpointed policy or Q-network. The scenario is
// chosen from the network's input width (1v1 or 1v2).
inline EvalResult evaluate(const nn::Checkpoint& ckpt, const ExperimentConfig& cfg, int episodes,
                           std::uint64_t env_seed = 0)
{
  if (episodes < 1) throw ConfigError("episodes: must be >= 1");
  if (ckpt.kind != "policy" && ckpt.kind != "qnet")
    throw RunError("checkpoint mismatch: kind '" + ckpt.kind + "' cannot be evaluated");
  auto map = load_config_map(cfg);
  const auto dim = ckpt.network.input_dim();
  if (dim < 5 || (dim - 1) % 2 != 0) throw RunError("checkpoint mismatch: input width " + std::to_string(dim));
  const int n_enemies = static_cast<int>((dim - 1) / 2 - 1);
  EvalResult out;
  out.kind = ckpt.kind;
  out.case_name = "1v" + std::to_string(n_enemies);
  if (!cfg.scenarios.count(out.case_name))
    throw RunError("checkpoint mismatch: config has no scenario '" + out.case_name + "'");
  arena::EnvConfig ec = cfg.env_config(out.case_name, env_seed);
  try {
    ec.validate(*map);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  arena::Environment env(map, ec);
  arena::StateCodec codec(map, n_enemies);

  pilco::ActionFn act;
  std::optional<pilco::Policy> policy;
  if (ckpt.kind == "policy") {
    policy = pilco::Policy::from_checkpoint(ckpt);
    act = [&](const nn::RowVector& s) { return policy->act(s); };
  } else {
    if (ckpt.network.output_dim() != dql::kActionCount) throw RunError("checkpoint mismatch: Q-network needs 4 outputs");
    act = [&](const nn::RowVector& s) { return dql::greedy_action(ckpt.network.forward(s).row(0)) + 0.5; };
  }
  for (int e = 0; e < episodes; ++e) {
    EpisodeLog log = pilco::rollout_real(env, codec, act, nullptr, cfg.horizon);
    out.rewards.push_back(log.episodic_reward);
    out.resting_areas.push_back(log.positions.back());
  }
  double sum = 0.0;
  for (int r : out.rewards) sum += r;
  out.mean = sum / episodes;
  double ss = 0.0;
  for (int r : out.rewards) ss += (r - out.mean) * (r - out.mean);
  out.stddev = episodes > 1 ? std::sqrt(ss / (episodes - 1)) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// oracle

struct OracleCase {
  std::string name;
  int target_n = 0;
  std::vector<arena::AreaId> enemies;
  std::vector<arena::AreaId> optimal_areas;
  bool start_visible_count_zero = false;
};

struct OracleReport {
  std::string map;
  arena::AreaId start_area = 0;
  std::vector<OracleCase> cases;

  bool admits_optimum() const
  {
    return std::all_of(cases.begin(), cases.end(), [](const OracleCase& c) { return !c.optimal_areas.empty(); });
  }
};

inline OracleReport oracle_report(const ExperimentConfig& cfg, const arena::ArenaMap& map)
{
  OracleReport rep;
  rep.map = cfg.map_path.string();
  rep.start_area = cfg.start_area;
  for (const auto& [name, s] : cfg.scenarios) {
    OracleCase c;
    c.name = name;
    c.target_n = s.target_n;
    c.enemies = s.true_enemy_areas;
    c.optimal_areas = arena::oracle_optimal_areas(map, s.true_enemy_areas, s.target_n);
    c.start_visible_count_zero = std::none_of(s.true_enemy_areas.begin(), s.true_enemy_areas.end(),
                                              [&](arena::AreaId e) { return arena::visible(map, cfg.start_area, e); });
    rep.cases.push_back(std::move(c));
  }
  return rep;
}

inline std::string format_report(const OracleReport& rep)
{
  auto join = [](const std::vector<arena::AreaId>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
  };
  std::ostringstream os;
  os << "map: " << rep.map << "\n";
  os << "start_area: " << rep.start_area << "\n";
  for (const OracleCase& c : rep.cases) {
    os << "case " << c.name << ": target_n=" << c.target_n << " enemies=[" << join(c.enemies) << "]"
       << " start_sees_none=" << (c.start_visible_count_zero ? "yes" : "no") << "\n";
    os << "  optimal_areas: [" << join(c.optimal_areas) << "]\n";
  }
  os << "admits_optimum: " << (rep.admits_optimum() ? "yes" : "no") << "\n";
  return os.str();
}

} // namespace combat::harness
