#pragma once

// Experiment configuration: JSON file plus command-line overrides. Every key
// is optional except `map`; unknown keys are rejected so that typos surface
// as config errors instead of silently running the defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "combat/arena.hpp"
#include "combat/dql.hpp"
#include "combat/pilco.hpp"
#include "combat/random.hpp"

namespace combat::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Algorithm { Pilco, Dql };
enum class Profile { Sim, Real };

inline std::string to_string(Algorithm a) { return a == Algorithm::Pilco ? "pilco" : "dql"; }
inline std::string to_string(Profile p) { return p == Profile::Sim ? "sim" : "real"; }

inline Algorithm parse_algorithm(const std::string& s)
{
  if (s == "pilco") return Algorithm::Pilco;
  if (s == "dql") return Algorithm::Dql;
  throw ConfigError("algorithm: expected 'pilco' or 'dql', got '" + s + "'");
}

inline Profile parse_profile(const std::string& s)
{
  if (s == "sim") return Profile::Sim;
  if (s == "real") return Profile::Real;
  throw ConfigError("profile: expected 'sim' or 'real', got '" + s + "'");
}

struct Scenario {
  std::vector<arena::AreaId> true_enemy_areas;
  std::vector<arena::AreaId> initial_assumed_enemy_areas;
  int target_n = 1;
};

struct WalltimeModel {
  double exec_seconds_per_iter = 10.0;
  double sim_speedup = 2.4;
  // Fixed compute charged per episode instead of the measured value.
  std::optional<double> compute_override;

  double speedup(Profile p) const { return p == Profile::Sim ? sim_speedup : 1.0; }

  double compute_charged(double measured) const { return compute_override ? *compute_override : measured; }

  // exec * T / speedup + compute.
  double episode_seconds(int horizon, Profile profile, double measured_compute) const
  {
    return exec_seconds_per_iter * horizon / speedup(profile) + compute_charged(measured_compute);
  }

  void validate() const
  {
    if (!(exec_seconds_per_iter > 0.0)) throw ConfigError("walltime.exec_seconds_per_iter must be > 0");
    if (!(sim_speedup > 0.0)) throw ConfigError("walltime.sim_speedup must be > 0");
    if (compute_override && !(*compute_override >= 0.0))
      throw ConfigError("walltime.compute_override_seconds must be >= 0");
  }
};

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::Pilco;
  std::string case_name = "1v2";
  Profile profile = Profile::Sim;
  fs::path map_path;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::optional<int> episodes; // overrides the per-algorithm budget

  arena::AreaId start_area = 0;
  int horizon = 10;
  double detection_miss_prob = 0.0;
  std::map<std::string, Scenario> scenarios;

  pilco::PilcoConfig pilco;
  int pilco_episodes = 30;
  dql::DqlConfig dql;
  int dql_width_sim = 128;
  int dql_width_real = 16;
  int dql_episodes = 400;

  double exec_seconds_per_iter = 10.0;
  double sim_speedup = 2.4;
  std::map<std::string, std::optional<double>> compute_override{{"pilco", 60.0}, {"dql", 3.0}};

  double threshold = 8.0;
  int patience = 3;

  int episode_budget() const
  {
    if (episodes) return *episodes;
    return algorithm == Algorithm::Pilco ? pilco_episodes : dql_episodes;
  }

  const Scenario& scenario() const
  {
    auto it = scenarios.find(case_name);
    if (it == scenarios.end()) throw ConfigError("case: no scenario named '" + case_name + "'");
    return it->second;
  }

  int n_enemies() const { return static_cast<int>(scenario().true_enemy_areas.size()); }

  WalltimeModel walltime() const
  {
    WalltimeModel w{exec_seconds_per_iter, sim_speedup, std::nullopt};
    auto it = compute_override.find(to_string(algorithm));
    if (it != compute_override.end()) w.compute_override = it->second;
    return w;
  }

  // Environment for one scenario; rng_seed only matters when detections can miss.
  arena::EnvConfig env_config(const std::string& scenario_name, std::uint64_t rng_seed) const
  {
    auto it = scenarios.find(scenario_name);
    if (it == scenarios.end()) throw ConfigError("case: no scenario named '" + scenario_name + "'");
    arena::EnvConfig e;
    e.n_enemies = static_cast<int>(it->second.true_enemy_areas.size());
    e.target_n = it->second.target_n;
    e.true_enemy_areas = it->second.true_enemy_areas;
    e.initial_assumed_enemy_areas = it->second.initial_assumed_enemy_areas;
    e.start_area = start_area;
    e.horizon = horizon;
    e.detection_miss_prob = detection_miss_prob;
    e.rng_seed = rng_seed;
    return e;
  }
  arena::EnvConfig env_config(std::uint64_t rng_seed) const { return env_config(case_name, rng_seed); }

  // Module configs with the run-level settings folded in.
  pilco::PilcoConfig resolved_pilco() const
  {
    pilco::PilcoConfig c = pilco;
    c.horizon = horizon;
    c.max_episodes = episode_budget();
    c.convergence_threshold = threshold;
    c.convergence_patience = patience;
    return c;
  }

  dql::DqlConfig resolved_dql() const
  {
    dql::DqlConfig c = dql;
    c.horizon = horizon;
    c.max_episodes = episode_budget();
    c.hidden_width = profile == Profile::Sim ? dql_width_sim : dql_width_real;
    c.convergence_threshold = threshold;
    c.convergence_patience = patience;
    return c;
  }
};

namespace detail {

// Typed access to one JSON object with path-qualified error messages.
class Reader {
public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path))
  {
    if (!j_.is_object()) throw ConfigError(name() + ": expected an object");
  }

  ~Reader() noexcept(false)
  {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(qualify(it.key()) + ": unknown key");
    }
  }

  bool has(const std::string& key)
  {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& raw(const std::string& key)
  {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const std::string& key, T& out)
  {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(qualify(key) + ": wrong type");
    }
  }

  void get_int(const std::string& key, int& out, int min)
  {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(qualify(key) + ": expected an integer");
    const auto x = v.get<long long>();
    if (x < min || x > std::numeric_limits<int>::max())
      throw ConfigError(qualify(key) + ": must be >= " + std::to_string(min));
    out = static_cast<int>(x);
  }

  void get_number(const std::string& key, double& out)
  {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(qualify(key) + ": expected a number");
    out = v.get<double>();
  }

  void get_bool(const std::string& key, bool& out)
  {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(qualify(key) + ": expected true or false");
    out = v.get<bool>();
  }

  void get_int_list(const std::string& key, std::vector<int>& out, int min)
  {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(qualify(key) + ": expected an array of integers");
    out.clear();
    for (const json& e : v) {
      if (!e.is_number_integer() || e.get<long long>() < min)
        throw ConfigError(qualify(key) + ": entries must be integers >= " + std::to_string(min));
      out.push_back(e.get<int>());
    }
  }

  std::string name() const { return path_.empty() ? "config" : path_; }

private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<std::uint64_t> parse_seed_list(const json& v, const std::string& where)
{
  if (!v.is_array()) throw ConfigError(where + ": expected an array of non-negative integers");
  std::vector<std::uint64_t> out;
  for (const json& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 0)
      throw ConfigError(where + ": seeds must be non-negative integers");
    out.push_back(e.get<std::uint64_t>());
  }
  return out;
}

} // namespace detail

// Parses "1,2,3" as given on the command line.
inline std::vector<std::uint64_t> parse_seed_string(const std::string& s)
{
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seeds: '" + s + "' is not a comma-separated list of non-negative integers");
    try {
      out.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw ConfigError("seeds: '" + tok + "' is out of range");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// Semantic checks that need the whole config (and the map).
inline void validate(const ExperimentConfig& c, const arena::ArenaMap& map)
{
  if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  std::set<std::uint64_t> unique(c.seeds.begin(), c.seeds.end());
  if (unique.size() != c.seeds.size()) throw ConfigError("seeds: duplicates are not allowed");
  if (c.episode_budget() < 1) throw ConfigError("episodes: budget must be >= 1");
  if (c.scenarios.empty()) throw ConfigError("scenarios: at least one scenario is required");
  c.scenario();
  for (const auto& [name, s] : c.scenarios) {
    try {
      c.env_config(name, 0).validate(map);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("scenarios." + name + ": " + e.what());
    }
  }
  try {
    c.resolved_pilco().validate();
    c.resolved_dql().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.walltime().validate();
  if (c.patience < 1) throw ConfigError("convergence.patience must be >= 1");
}

inline ExperimentConfig parse_config(const json& j, const fs::path& base_dir)
{
  ExperimentConfig c;
  detail::Reader r(j, "");

  std::string s;
  if (r.has("algorithm")) {
    r.get("algorithm", s);
    c.algorithm = parse_algorithm(s);
  }
  r.get("case", c.case_name);
  if (r.has("profile")) {
    r.get("profile", s);
    c.profile = parse_profile(s);
  }
  if (!r.has("map")) throw ConfigError("map: required");
  {
    std::string m;
    r.get("map", m);
    fs::path p(m);
    if (p.is_relative()) p = base_dir / p;
    c.map_path = p.lexically_normal();
  }
  if (r.has("seeds")) c.seeds = detail::parse_seed_list(r.raw("seeds"), "seeds");
  if (r.has("episodes")) {
    int e = 0;
    r.get_int("episodes", e, 1);
    c.episodes = e;
  }

  if (r.has("environment")) {
    detail::Reader e(r.raw("environment"), "environment");
    e.get_int("start_area", c.start_area, 0);
    e.get_int("horizon", c.horizon, 1);
    e.get_number("detection_miss_prob", c.detection_miss_prob);
  }

  if (r.has("scenarios")) {
    const json& sj = r.raw("scenarios");
    if (!sj.is_object()) throw ConfigError("scenarios: expected an object");
    for (auto it = sj.begin(); it != sj.end(); ++it) {
      detail::Reader sr(it.value(), "scenarios." + it.key());
      Scenario sc;
      sr.get_int_list("true_enemy_areas", sc.true_enemy_areas, 0);
      sr.get_int_list("initial_assumed_enemy_areas", sc.initial_assumed_enemy_areas, 0);
      sc.target_n = static_cast<int>(sc.true_enemy_areas.size());
      sr.get_int("target_n", sc.target_n, 0);
      c.scenarios[it.key()] = sc;
    }
  }

  if (r.has("pilco")) {
    detail::Reader p(r.raw("pilco"), "pilco");
    pilco::PilcoConfig& pc = c.pilco;
    p.get_int("episodes", c.pilco_episodes, 1);
    p.get_int("particles", pc.particles, 2);
    p.get_int("random_rollouts", pc.random_rollouts, 0);
    p.get_int("policy_opt_steps", pc.policy_opt_steps, 0);
    p.get_int("policy_restarts", pc.policy_restarts, 0);
    p.get_int("plateau_patience", pc.plateau_patience, 1);
    p.get_number("plateau_tol", pc.plateau_tol);
    p.get_number("policy_learning_rate", pc.policy_learning_rate);
    p.get_number("gradient_clip_norm", pc.gradient_clip_norm);
    p.get_number("cost_steepness", pc.cost_steepness);
    p.get_bool("moment_matching", pc.moment_matching);
    p.get_int_list("policy_hidden", pc.policy_hidden, 1);
    p.get_bool("stop_on_convergence", pc.stop_on_convergence);
    if (p.has("dynamics")) {
      detail::Reader d(p.raw("dynamics"), "pilco.dynamics");
      d.get_int_list("hidden", pc.dynamics.hidden, 1);
      d.get_number("dropout", pc.dynamics.dropout);
      if (!(pc.dynamics.dropout >= 0.0 && pc.dynamics.dropout < 1.0))
        throw ConfigError("pilco.dynamics.dropout: must lie in [0, 1)");
      d.get_int("epochs", pc.fit.epochs, 0);
      d.get_int("batch_size", pc.fit.batch_size, 1);
      d.get_number("learning_rate", pc.fit.optimizer.learning_rate);
      if (!(pc.fit.optimizer.learning_rate > 0.0)) throw ConfigError("pilco.dynamics.learning_rate: must be > 0");
      d.get_number("weight_decay", pc.fit.weight_decay);
      if (!(pc.fit.weight_decay >= 0.0)) throw ConfigError("pilco.dynamics.weight_decay: must be >= 0");
      d.get_bool("warm_start", pc.fit.warm_start);
    }
  }

  if (r.has("dql")) {
    detail::Reader d(r.raw("dql"), "dql");
    dql::DqlConfig& dc = c.dql;
    d.get_int("episodes", c.dql_episodes, 1);
    d.get_number("epsilon", dc.epsilon);
    d.get_number("gamma", dc.gamma);
    d.get_number("learning_rate", dc.learning_rate);
    d.get_int("batch_size", dc.batch_size, 1);
    d.get_int("target_sync", dc.target_sync, 1);
    int cap = static_cast<int>(dc.buffer_capacity);
    d.get_int("buffer_capacity", cap, 1);
    dc.buffer_capacity = static_cast<std::size_t>(cap);
    d.get_int("rolling_window", dc.rolling_window, 1);
    if (d.has("hidden_width")) {
      detail::Reader w(d.raw("hidden_width"), "dql.hidden_width");
      w.get_int("sim", c.dql_width_sim, 1);
      w.get_int("real", c.dql_width_real, 1);
    }
  }

  if (r.has("walltime")) {
    detail::Reader w(r.raw("walltime"), "walltime");
    w.get_number("exec_seconds_per_iter", c.exec_seconds_per_iter);
    w.get_number("sim_speedup", c.sim_speedup);
    if (w.has("compute_override_seconds")) {
      const json& o = w.raw("compute_override_seconds");
      if (!o.is_object()) throw ConfigError("walltime.compute_override_seconds: expected an object");
      for (auto it = o.begin(); it != o.end(); ++it) {
        parse_algorithm(it.key());
        if (it.value().is_null()) c.compute_override[it.key()] = std::nullopt;
        else if (it.value().is_number()) c.compute_override[it.key()] = it.value().get<double>();
        else throw ConfigError("walltime.compute_override_seconds." + it.key() + ": expected a number or null");
      }
    }
  }

  if (r.has("convergence")) {
    detail::Reader cv(r.raw("convergence"), "convergence");
    cv.get_number("threshold", c.threshold);
    cv.get_int("patience", c.patience, 1);
  }
  return c;
}

inline json to_json(const ExperimentConfig& c)
{
  json j;
  j["algorithm"] = to_string(c.algorithm);
  j["case"] = c.case_name;
  j["profile"] = to_string(c.profile);
  j["map"] = fs::absolute(c.map_path).lexically_normal().string();
  j["seeds"] = c.seeds;
  j["episodes"] = c.episode_budget();
  j["environment"] = {{"start_area", c.start_area}, {"horizon", c.horizon},
                      {"detection_miss_prob", c.detection_miss_prob}};
  json sc = json::object();
  for (const auto& [name, s] : c.scenarios)
    sc[name] = {{"true_enemy_areas", s.true_enemy_areas},
                {"initial_assumed_enemy_areas", s.initial_assumed_enemy_areas},
                {"target_n", s.target_n}};
  j["scenarios"] = sc;
  const pilco::PilcoConfig& p = c.pilco;
  j["pilco"] = {{"episodes", c.pilco_episodes},
                {"particles", p.particles},
                {"random_rollouts", p.random_rollouts},
                {"policy_opt_steps", p.policy_opt_steps},
                {"policy_restarts", p.policy_restarts},
                {"plateau_patience", p.plateau_patience},
                {"plateau_tol", p.plateau_tol},
                {"policy_learning_rate", p.policy_learning_rate},
                {"gradient_clip_norm", p.gradient_clip_norm},
                {"cost_steepness", p.cost_steepness},
                {"moment_matching", p.moment_matching},
                {"policy_hidden", p.policy_hidden},
                {"stop_on_convergence", p.stop_on_convergence},
                {"dynamics",
                 {{"hidden", p.dynamics.hidden},
                  {"dropout", p.dynamics.dropout},
                  {"epochs", p.fit.epochs},
                  {"batch_size", p.fit.batch_size},
                  {"learning_rate", p.fit.optimizer.learning_rate},
                  {"weight_decay", p.fit.weight_decay},
                  {"warm_start", p.fit.warm_start}}}};
  const dql::DqlConfig& d = c.dql;
  j["dql"] = {{"episodes", c.dql_episodes},
              {"epsilon", d.epsilon},
              {"gamma", d.gamma},
              {"learning_rate", d.learning_rate},
              {"batch_size", d.batch_size},
              {"target_sync", d.target_sync},
              {"buffer_capacity", d.buffer_capacity},
              {"rolling_window", d.rolling_window},
              {"hidden_width", {{"sim", c.dql_width_sim}, {"real", c.dql_width_real}}}};
  json overrides = json::object();
  for (const auto& [k, v] : c.compute_override) overrides[k] = v ? json(*v) : json(nullptr);
  j["walltime"] = {{"exec_seconds_per_iter", c.exec_seconds_per_iter},
                   {"sim_speedup", c.sim_speedup},
                   {"compute_override_seconds", overrides}};
  j["convergence"] = {{"threshold", c.threshold}, {"patience", c.patience}};
  return j;
}

inline json read_json_file(const fs::path& path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in '" + path.string() + "': " + e.what());
  }
}

inline ExperimentConfig load_config(const fs::path& path)
{
  return parse_config(read_json_file(path), path.parent_path());
}

inline std::shared_ptr<const arena::ArenaMap> load_config_map(const ExperimentConfig& c)
{
  if (!fs::exists(c.map_path)) throw ConfigError("map: file '" + c.map_path.string() + "' does not exist");
  try {
    return std::make_shared<const arena::ArenaMap>(arena::load_map(c.map_path.string()));
  } catch (const std::exception& e) {
    throw ConfigError("map: " + std::string(e.what()));
  }
}

struct Overrides {
  std::optional<std::string> algorithm;
  std::optional<std::string> case_name;
  std::optional<std::string> profile;
  std::optional<std::string> seeds;
  std::optional<int> episodes;
};

inline void apply_overrides(ExperimentConfig& c, const Overrides& o)
{
  if (o.algorithm) c.algorithm = parse_algorithm(*o.algorithm);
  if (o.case_name) c.case_name = *o.case_name;
  if (o.profile) c.profile = parse_profile(*o.profile);
  if (o.seeds) c.seeds = parse_seed_string(*o.seeds);
  if (o.episodes) {
    if (*o.episodes < 1) throw ConfigError("episodes: budget must be >= 1");
    c.episodes = *o.episodes;
  }
}

} // namespace combat::harness
