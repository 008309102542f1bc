#pragma once

// Deep PILCO episode loop: run the policy on the environment, refit the
// dropout dynamics model, predict particle trajectories and descend the
// expected cumulative cost with respect to the policy parameters.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "combat/arena.hpp"
#include "combat/dynamics.hpp"
#include "combat/episode_log.hpp"
#include "combat/network.hpp"
#include "combat/optimizer.hpp"
#include "combat/random.hpp"

namespace combat::pilco {

using nn::Matrix;
using nn::RowVector;
using nn::Var;

struct PilcoConfig {
  int horizon = 10;
  int particles = 10;
  int random_rollouts = 1;
  int policy_opt_steps = 500;
  // Extra randomly initialized starting points per optimization pass; every
  // start descends on the same fixed noise and the lowest J wins.
  int policy_restarts = 0;
  // Early stop when the best J has not improved by plateau_tol for this many steps.
  int plateau_patience = 100;
  double plateau_tol = 1e-4;
  double policy_learning_rate = 0.01;
  double gradient_clip_norm = 1.0;
  double cost_steepness = 10.0;
  bool moment_matching = true;
  std::vector<int> policy_hidden{32};
  bnn::DynamicsConfig dynamics;
  bnn::FitConfig fit;
  int max_episodes = 30;
  double convergence_threshold = 8.0;
  int convergence_patience = 3;
  bool stop_on_convergence = true;

  void validate() const
  {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid pilco config: " + what); };
    if (horizon < 1) fail("horizon must be >= 1");
    if (particles < 2) fail("particles must be >= 2");
    if (random_rollouts < 0) fail("random_rollouts must be >= 0");
    if (policy_opt_steps < 0) fail("policy_opt_steps must be >= 0");
    if (policy_restarts < 0) fail("policy_restarts must be >= 0");
    if (!(cost_steepness > 0.0)) fail("cost_steepness must be > 0");
    if (!(policy_learning_rate > 0.0)) fail("policy_learning_rate must be > 0");
    if (!(gradient_clip_norm > 0.0)) fail("gradient_clip_norm must be > 0");
    if (max_episodes < 1) fail("max_episodes must be >= 1");
    if (convergence_patience < 1) fail("convergence_patience must be >= 1");
  }
};

// Deterministic policy; output squashed to [0, 4) by a scaled sigmoid.
class Policy {
public:
  Policy() = default;
  Policy(int state_dim, const std::vector<int>& hidden, Rng& rng)
      : net_(nn::Network::mlp(state_dim, hidden, 1, nn::Activation::Tanh, nn::Activation::ScaledSigmoid, 0.0, rng, 4.0))
  {
  }
  explicit Policy(nn::Network net) : net_(std::move(net))
  {
    if (net_.output_dim() != 1 || net_.layers().back().activation != nn::Activation::ScaledSigmoid ||
        net_.layers().back().scale != 4.0)
      throw std::invalid_argument("policy network must end in a single 4*sigmoid output");
  }

  const nn::Network& network() const { return net_; }
  nn::Network& mutable_network() { return net_; }
  Eigen::Index state_dim() const { return net_.input_dim(); }

  double act(const RowVector& state) const { return net_.forward(state)(0, 0); }
  Matrix act(const Matrix& states) const { return net_.forward(states); }

  nn::Checkpoint to_checkpoint() const { return {"policy", net_, {}}; }
  static Policy from_checkpoint(const nn::Checkpoint& c)
  {
    if (c.kind != "policy") throw nn::CheckpointError("checkpoint kind is '" + c.kind + "', expected 'policy'");
    return Policy(c.network);
  }

private:
  nn::Network net_;
};

// Differentiable stand-in for 1 - R: 1 - sigmoid(kappa * (n_visible - (target - 0.5)))
// where n_visible is the continuous visible-count coordinate scaled back to
// enemy units.
inline double smooth_cost(const RowVector& particle, int count_index, int n_enemies, int target_n, double kappa)
{
  const double n_visible = particle(count_index) * n_enemies;
  const double z = kappa * (n_visible - (target_n - 0.5));
  return 1.0 / (1.0 + std::exp(z));
}

// Per-particle costs, K x 1.
inline Var smooth_cost(const Var& particles, int count_index, int n_enemies, int target_n, double kappa)
{
  Var count = nn::scale(nn::slice_cols(particles, count_index, 1), static_cast<double>(n_enemies));
  Var z = nn::add_scalar(count, -(target_n - 0.5));
  return nn::sigmoid(nn::scale(z, -kappa));
}

// Task constants the cost needs from the environment.
struct CostSpec {
  int count_index = 0;
  int n_enemies = 1;
  int target_n = 1;
};

// Random numbers held fixed for one optimization pass: per-particle dropout
// masks and per-step resampling noise.
struct RolloutNoise {
  nn::DropoutMask masks;
  std::vector<Matrix> resample;
};

inline RolloutNoise sample_rollout_noise(const bnn::DynamicsModel& model, const PilcoConfig& config, Rng& rng)
{
  RolloutNoise n;
  n.masks = bnn::sample_masks(model, config.particles, rng);
  if (config.moment_matching)
    for (int t = 0; t < config.horizon; ++t)
      n.resample.push_back(bnn::gaussian_noise(config.particles, model.state_dim(), rng));
  return n;
}

struct PredictedTrajectory {
  std::vector<Matrix> particles; // T+1 entries, K x d
  std::vector<Matrix> actions;   // T entries, K x 1
};

struct Prediction {
  PredictedTrajectory trajectory;
  double cost = 0.0;
};

namespace detail {

// Records J on the tape; fills the trajectory if requested.
inline Var record_cost(nn::Tape& tape, const bnn::DynamicsModel& model, const nn::BoundNetwork& policy,
                       const RowVector& init_state, const PilcoConfig& config, const CostSpec& cost,
                       const RolloutNoise& noise, PredictedTrajectory* trajectory)
{
  if (init_state.size() != model.state_dim()) throw std::invalid_argument("initial state dimension mismatch");
  nn::BoundNetwork dyn = model.network().bind(tape, false);
  Var x = tape.constant(init_state.replicate(config.particles, 1));
  if (trajectory) trajectory->particles.push_back(x.value());
  Var total;
  for (int t = 0; t < config.horizon; ++t) {
    Var u = policy.forward(x);
    x = bnn::propagate(model, dyn, x, u, noise.masks);
    if (config.moment_matching) x = bnn::moment_match(x, noise.resample.at(static_cast<std::size_t>(t)));
    Var c = nn::mean(smooth_cost(x, cost.count_index, cost.n_enemies, cost.target_n, config.cost_steepness));
    total = t == 0 ? c : nn::add(total, c);
    if (trajectory) {
      trajectory->actions.push_back(u.value());
      trajectory->particles.push_back(x.value());
    }
  }
  return total;
}

} // namespace detail

// J = sum over t=1..T of the particle-mean surrogate cost, particles starting
// from a delta distribution at init_state.
inline Prediction predict_and_cost(const bnn::DynamicsModel& model, const Policy& policy, const RowVector& init_state,
                                   const PilcoConfig& config, const CostSpec& cost, const RolloutNoise& noise)
{
  nn::Tape tape;
  nn::BoundNetwork pb = policy.network().bind(tape, false);
  Prediction p;
  Var j = detail::record_cost(tape, model, pb, init_state, config, cost, noise, &p.trajectory);
  p.cost = j.value()(0, 0);
  if (!std::isfinite(p.cost)) throw std::runtime_error("predicted cost is not finite");
  return p;
}

// J and dJ/dphi through the reparameterized particle rollout.
inline double cost_and_gradient(const bnn::DynamicsModel& model, const Policy& policy, const RowVector& init_state,
                                const PilcoConfig& config, const CostSpec& cost, const RolloutNoise& noise,
                                nn::Gradients& grad)
{
  nn::Tape tape;
  nn::BoundNetwork pb = policy.network().bind(tape, true);
  Var j = detail::record_cost(tape, model, pb, init_state, config, cost, noise, nullptr);
  tape.backward(j);
  grad = pb.gradients();
  const double value = j.value()(0, 0);
  if (!std::isfinite(value)) throw std::runtime_error("predicted cost is not finite");
  return value;
}

struct OptimizeReport {
  double initial_cost = 0.0;
  double best_cost = 0.0;
  int steps = 0;
  int best_start = 0; // 0 is the incoming policy, k > 0 the k-th restart
  std::vector<double> costs;
};

namespace detail {

struct DescentResult {
  nn::Network best;
  double best_cost = 0.0;
  double initial_cost = 0.0;
  int steps = 0;
  std::vector<double> costs;
};

inline DescentResult descend(const bnn::DynamicsModel& model, Policy policy, const RowVector& init_state,
                             const PilcoConfig& config, const CostSpec& cost, const RolloutNoise& noise)
{
  DescentResult r;
  nn::Optimizer opt({nn::OptimizerKind::Adam, config.policy_learning_rate, config.gradient_clip_norm});
  r.best = policy.network();
  r.best_cost = std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  for (int step = 0; step < config.policy_opt_steps; ++step) {
    nn::Gradients g;
    const double j = cost_and_gradient(model, policy, init_state, config, cost, noise, g);
    r.costs.push_back(j);
    if (step == 0) r.initial_cost = j;
    if (j < r.best_cost - config.plateau_tol) since_improvement = 0;
    else ++since_improvement;
    if (j < r.best_cost) {
      r.best_cost = j;
      r.best = policy.network();
    }
    ++r.steps;
    if (since_improvement >= config.plateau_patience) return r;
    opt.apply(policy.mutable_network(), std::move(g));
  }
  // The final parameters have not been scored yet.
  const double last = predict_and_cost(model, policy, init_state, config, cost, noise).cost;
  r.costs.push_back(last);
  if (last < r.best_cost) {
    r.best_cost = last;
    r.best = policy.network();
  }
  return r;
}

} // namespace detail

// Clipped Adam descent on J with rollout noise held fixed for the whole
// pass. Besides the incoming policy, `policy_restarts` freshly initialized
// policies are descended as well; the policy ends at the parameters with
// the lowest J seen.
inline OptimizeReport optimize_policy(const bnn::DynamicsModel& model, Policy& policy, const RowVector& init_state,
                                      const PilcoConfig& config, const CostSpec& cost, Rng& rng)
{
  OptimizeReport report;
  if (config.policy_opt_steps == 0) return report;
  const RolloutNoise noise = sample_rollout_noise(model, config, rng);
  std::vector<int> hidden;
  for (std::size_t i = 0; i + 1 < policy.network().layers().size(); ++i)
    hidden.push_back(static_cast<int>(policy.network().layers()[i].out()));

  double best_cost = std::numeric_limits<double>::infinity();
  nn::Network best;
  for (int start = 0; start <= config.policy_restarts; ++start) {
    Policy candidate = start == 0 ? policy : Policy(static_cast<int>(policy.state_dim()), hidden, rng);
    detail::DescentResult r = detail::descend(model, std::move(candidate), init_state, config, cost, noise);
    if (start == 0) report.initial_cost = r.initial_cost;
    report.steps += r.steps;
    report.costs.insert(report.costs.end(), r.costs.begin(), r.costs.end());
    if (r.best_cost < best_cost) {
      best_cost = r.best_cost;
      best = std::move(r.best);
      report.best_start = start;
    }
  }
  policy.mutable_network() = std::move(best);
  report.best_cost = best_cost;
  return report;
}

using ActionFn = std::function<double(const RowVector& encoded_state)>;

// Runs one episode of `horizon` iterations, appending every transition to
// the dataset (when given). Returns the per-iteration rewards.
inline EpisodeLog rollout_real(arena::Environment& env, const arena::StateCodec& codec, const ActionFn& act,
                               bnn::TransitionDataset* record, int horizon)
{
  EpisodeLog log;
  arena::State s = env.reset();
  for (int t = 0; t < horizon; ++t) {
    RowVector enc = codec.encode(s);
    const double u = act(enc);
    arena::StepResult r = env.step(s, arena::Action::continuous(u));
    if (record) record->append(enc, u, codec.encode(r.state));
    log.iteration_rewards.push_back(r.reward);
    log.episodic_reward += r.reward;
    log.positions.push_back(r.state.own);
    s = std::move(r.state);
  }
  return log;
}

inline EpisodeLog rollout_real(arena::Environment& env, const arena::StateCodec& codec, const Policy& policy,
                               bnn::TransitionDataset* record, int horizon)
{
  return rollout_real(env, codec, [&](const RowVector& s) { return policy.act(s); }, record, horizon);
}

struct TrainResult {
  Policy policy;
  bnn::DynamicsModel model;
  bnn::TransitionDataset dataset;
  std::vector<EpisodeLog> logs;
  std::vector<EpisodeLog> random_logs;
  std::optional<std::size_t> converged_at;
};

using EpisodeCallback = std::function<void(const EpisodeLog&)>;

// Random-action rollouts seed the dataset; each learning episode then fits
// the model, optimizes the policy and executes it. Stops after max_episodes
// or (unless disabled) once `convergence_patience` consecutive episodes reach
// the threshold.
inline TrainResult train(arena::Environment& env, const arena::StateCodec& codec, const PilcoConfig& config,
                         std::uint64_t seed, const EpisodeCallback& on_episode = {})
{
  config.validate();
  if (env.horizon() != config.horizon) throw std::invalid_argument("pilco horizon differs from environment horizon");
  const CostSpec cost{codec.count_index(), codec.n_enemies(), env.config().target_n};
  Rng init_rng(derive_seed(seed, 1));
  Rng explore_rng(derive_seed(seed, 2));
  Rng fit_rng(derive_seed(seed, 3));
  Rng opt_rng(derive_seed(seed, 4));

  TrainResult out;
  out.model = bnn::DynamicsModel(codec.dim(), config.dynamics, init_rng);
  out.policy = Policy(codec.dim(), config.policy_hidden, init_rng);

  for (int r = 0; r < config.random_rollouts; ++r) {
    EpisodeLog log = rollout_real(
        env, codec, [&](const RowVector&) { return 4.0 * uniform01(explore_rng); }, &out.dataset, config.horizon);
    log.episode = -(r + 1);
    out.random_logs.push_back(std::move(log));
  }
  const RowVector init_state = codec.encode(env.reset());

  for (int ep = 1; ep <= config.max_episodes; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!out.dataset.empty()) {
      bnn::fit(out.model, out.dataset, config.fit, fit_rng);
      optimize_policy(out.model, out.policy, init_state, config, cost, opt_rng);
    }
    const double compute = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpisodeLog log = rollout_real(env, codec, out.policy, &out.dataset, config.horizon);
    log.episode = ep;
    log.compute_seconds = compute;
    if (on_episode) on_episode(log);
    out.logs.push_back(std::move(log));
    if (!out.converged_at) {
      out.converged_at = detect_convergence(out.logs, config.convergence_threshold, config.convergence_patience);
      if (out.converged_at && config.stop_on_convergence) break;
    }
  }
  return out;
}

} // namespace combat::pilco
