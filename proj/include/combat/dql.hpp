#pragma once

// Deep Q-learning baseline: ReLU Q-network with one output per neighbor
// slot, uniform experience replay, epsilon-greedy exploration and a
// periodically synchronized target network.

#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "combat/arena.hpp"
#include "combat/checkpoint.hpp"
#include "combat/episode_log.hpp"
#include "combat/network.hpp"
#include "combat/optimizer.hpp"
#include "combat/random.hpp"

namespace combat::dql {

using nn::Matrix;
using nn::RowVector;

inline constexpr int kActionCount = 4;

struct DqlConfig {
  double epsilon = 0.1;
  double gamma = 0.9;
  double learning_rate = 1e-3;
  int batch_size = 32;
  int target_sync = 100;
  int horizon = 10;
  int hidden_width = 128;
  std::size_t buffer_capacity = 20000;
  int rolling_window = 6;
  int max_episodes = 400;
  double convergence_threshold = 8.0;
  int convergence_patience = 3;
  bool stop_on_convergence = false;

  void validate() const
  {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid dql config: " + what); };
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) fail("epsilon must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must lie in [0, 1)");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (target_sync < 1) fail("target_sync must be >= 1");
    if (horizon < 1) fail("horizon must be >= 1");
    if (hidden_width < 1) fail("hidden_width must be >= 1");
    if (buffer_capacity < 1) fail("buffer_capacity must be >= 1");
    if (rolling_window < 1) fail("rolling_window must be >= 1");
    if (max_episodes < 1) fail("max_episodes must be >= 1");
    if (convergence_patience < 1) fail("convergence_patience must be >= 1");
  }
};

inline nn::Network make_qnetwork(int state_dim, int hidden_width, Rng& rng)
{
  return nn::Network::mlp(state_dim, {hidden_width, hidden_width}, kActionCount, nn::Activation::ReLU,
                          nn::Activation::Identity, 0.0, rng);
}

struct Experience {
  RowVector state;
  int action = 0;
  double reward = 0.0;
  RowVector next_state;
  bool terminal = false;
};

// Fixed-capacity FIFO ring; index 0 is the oldest retained entry.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity)
  {
    if (capacity_ == 0) throw std::invalid_argument("replay buffer capacity must be >= 1");
    storage_.reserve(std::min<std::size_t>(capacity_, 4096));
  }

  void push(Experience e)
  {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(e));
      return;
    }
    storage_[head_] = std::move(e);
    head_ = (head_ + 1) % capacity_;
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }

  const Experience& at(std::size_t i) const
  {
    if (i >= storage_.size()) throw std::out_of_range("replay buffer index out of range");
    return storage_[(head_ + i) % storage_.size()];
  }

  // Uniform sample of distinct indices (Floyd's algorithm).
  std::vector<std::size_t> sample_indices(std::size_t count, Rng& rng) const
  {
    if (count > storage_.size()) throw std::invalid_argument("sample larger than replay buffer");
    std::vector<std::size_t> out;
    out.reserve(count);
    std::unordered_set<std::size_t> chosen;
    const std::size_t n = storage_.size();
    for (std::size_t j = n - count; j < n; ++j) {
      std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
      if (chosen.count(t)) t = j;
      chosen.insert(t);
      out.push_back(t);
    }
    return out;
  }

private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Experience> storage_;
};

// Lowest index wins ties.
inline int greedy_action(const RowVector& q)
{
  int best = 0;
  for (int a = 1; a < q.size(); ++a)
    if (q(a) > q(best)) best = a;
  return best;
}

inline int select_action(const nn::Network& qnet, const RowVector& state, double epsilon, Rng& rng)
{
  if (uniform01(rng) < epsilon) return uniform_int(rng, 0, kActionCount - 1);
  return greedy_action(qnet.forward(state).row(0));
}

// Bellman target r + gamma * max_a' Q_target(s', a'), or r at a terminal step.
inline double td_target(double reward, double gamma, const nn::Network& target_net, const RowVector& next_state,
                        bool terminal)
{
  if (terminal) return reward;
  return reward + gamma * target_net.forward(next_state).row(0).maxCoeff();
}

class Agent {
public:
  Agent(int state_dim, const DqlConfig& config, Rng& init_rng)
      : config_(config), q_(make_qnetwork(state_dim, config.hidden_width, init_rng)), target_(q_),
        opt_({nn::OptimizerKind::Adam, config.learning_rate, std::nullopt})
  {
    config_.validate();
  }

  Agent(nn::Network q, const DqlConfig& config)
      : config_(config), q_(std::move(q)), target_(q_), opt_({nn::OptimizerKind::Adam, config.learning_rate, std::nullopt})
  {
    if (q_.output_dim() != kActionCount) throw std::invalid_argument("Q-network must have 4 outputs");
  }

  const nn::Network& qnet() const { return q_; }
  nn::Network& mutable_qnet() { return q_; }
  const nn::Network& target_net() const { return target_; }
  long updates() const { return updates_; }
  const DqlConfig& config() const { return config_; }

  // One minibatch step on the mean squared TD error. Returns nullopt (and
  // leaves every parameter untouched) while the buffer holds fewer than
  // batch_size entries.
  std::optional<double> train_step(const ReplayBuffer& buffer, Rng& rng)
  {
    const auto batch = static_cast<std::size_t>(config_.batch_size);
    if (buffer.size() < batch) return std::nullopt;
    const std::vector<std::size_t> idx = buffer.sample_indices(batch, rng);
    const Eigen::Index dim = buffer.at(0).state.size();
    const auto b = static_cast<Eigen::Index>(batch);
    Matrix states(b, dim);
    Matrix next(b, dim);
    for (Eigen::Index i = 0; i < b; ++i) {
      const Experience& e = buffer.at(idx[static_cast<std::size_t>(i)]);
      states.row(i) = e.state;
      next.row(i) = e.next_state;
    }
    const Matrix next_q = target_.forward(next);
    Matrix onehot = Matrix::Zero(b, kActionCount);
    Matrix targets = Matrix::Zero(b, kActionCount);
    for (Eigen::Index i = 0; i < b; ++i) {
      const Experience& e = buffer.at(idx[static_cast<std::size_t>(i)]);
      const double y = e.terminal ? e.reward : e.reward + config_.gamma * next_q.row(i).maxCoeff();
      onehot(i, e.action) = 1.0;
      targets(i, e.action) = y;
    }
    nn::Tape tape;
    nn::BoundNetwork bound = q_.bind(tape, true);
    nn::Var q = bound.forward(tape.constant(states));
    nn::Var err = nn::sub(nn::hadamard(q, tape.constant(onehot)), tape.constant(targets));
    nn::Var loss = nn::scale(nn::sum(nn::square(err)), 1.0 / static_cast<double>(b));
    tape.backward(loss);
    opt_.apply(q_, bound.gradients());
    ++updates_;
    if (updates_ % config_.target_sync == 0) target_ = q_;
    return loss.value()(0, 0);
  }

  nn::Checkpoint to_checkpoint() const { return {"qnet", q_, {}}; }

private:
  DqlConfig config_;
  nn::Network q_;
  nn::Network target_;
  nn::Optimizer opt_;
  long updates_ = 0;
};

struct TrainResult {
  nn::Network qnet;
  std::vector<EpisodeLog> logs;
  std::vector<double> losses;
  std::size_t buffer_size = 0;
  std::size_t max_buffer_size = 0;
  std::optional<std::size_t> converged_at;
};

using EpisodeCallback = std::function<void(const EpisodeLog&)>;

// Episodes of `horizon` steps; every step pushes one transition and runs one
// train_step. The last step of an episode is the only terminal one.
inline TrainResult train(arena::Environment& env, const arena::StateCodec& codec, const DqlConfig& config,
                         std::uint64_t seed, const EpisodeCallback& on_episode = {})
{
  config.validate();
  if (env.horizon() != config.horizon) throw std::invalid_argument("dql horizon differs from environment horizon");
  Rng init_rng(derive_seed(seed, 11));
  Rng act_rng(derive_seed(seed, 12));
  Rng sample_rng(derive_seed(seed, 13));
  Agent agent(codec.dim(), config, init_rng);
  ReplayBuffer buffer(config.buffer_capacity);
  TrainResult out;

  for (int ep = 1; ep <= config.max_episodes; ++ep) {
    EpisodeLog log;
    log.episode = ep;
    double compute = 0.0;
    arena::State s = env.reset();
    for (int t = 0; t < config.horizon; ++t) {
      const RowVector enc = codec.encode(s);
      auto t0 = std::chrono::steady_clock::now();
      const int a = select_action(agent.qnet(), enc, config.epsilon, act_rng);
      compute += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      arena::StepResult r = env.step(s, arena::Action::discrete(a));
      const bool terminal = t + 1 == config.horizon;
      buffer.push({enc, a, static_cast<double>(r.reward), codec.encode(r.state), terminal});
      out.max_buffer_size = std::max(out.max_buffer_size, buffer.size());
      t0 = std::chrono::steady_clock::now();
      if (auto loss = agent.train_step(buffer, sample_rng)) out.losses.push_back(*loss);
      compute += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.iteration_rewards.push_back(r.reward);
      log.episodic_reward += r.reward;
      log.positions.push_back(r.state.own);
      s = std::move(r.state);
    }
    log.compute_seconds = compute;
    if (on_episode) on_episode(log);
    out.logs.push_back(std::move(log));
    if (!out.converged_at) {
      out.converged_at = detect_convergence(out.logs, config.convergence_threshold, config.convergence_patience);
      if (out.converged_at && config.stop_on_convergence) break;
    }
  }
  out.qnet = agent.qnet();
  out.buffer_size = buffer.size();
  return out;
}

} // namespace combat::dql
