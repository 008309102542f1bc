#include <gtest/gtest.h>

#include <set>

#include "combat/dql.hpp"
#include "test_util.hpp"

using namespace combat;
using namespace combat::dql;

namespace {

// Linear Q-network whose outputs are exactly the bias (weights zero).
nn::Network constant_q(int dim, const std::vector<double>& q)
{
  nn::Layer l;
  l.weights = Matrix::Zero(dim, kActionCount);
  l.bias.resize(kActionCount);
  for (int a = 0; a < kActionCount; ++a) l.bias(a) = q[a];
  return nn::Network({l});
}

Experience exp_with(double tag)
{
  return {RowVector::Constant(2, tag), 0, tag, RowVector::Constant(2, tag), false};
}

arena::EnvConfig env_case(int n)
{
  arena::EnvConfig c;
  c.n_enemies = n;
  c.target_n = n;
  c.true_enemy_areas = n == 1 ? std::vector<int>{25} : std::vector<int>{25, 27};
  c.initial_assumed_enemy_areas = n == 1 ? std::vector<int>{29} : std::vector<int>{29, 24};
  return c;
}

} // namespace

TEST(TdTarget, Examples)
{
  nn::Network t = constant_q(3, {0.5, 2.0, -1.0, 1.5});
  const RowVector s = RowVector::Zero(3);
  EXPECT_DOUBLE_EQ(td_target(1.0, 0.9, t, s, false), 2.8);
  EXPECT_DOUBLE_EQ(td_target(1.0, 0.9, t, s, true), 1.0);
  EXPECT_DOUBLE_EQ(td_target(1.0, 0.0, t, s, false), 1.0);
}

TEST(TdTarget, LinearInReward)
{
  Rng rng(1);
  nn::Network t = make_qnetwork(5, 16, rng);
  for (int i = 0; i < 100; ++i) {
    const RowVector s = RowVector::Random(5);
    const double r = uniform01(rng), d = uniform01(rng) - 0.5;
    for (bool term : {false, true})
      EXPECT_NEAR(td_target(r + d, 0.9, t, s, term) - td_target(r, 0.9, t, s, term), d, 1e-12);
  }
}

TEST(SelectAction, GreedyWhenEpsilonZero)
{
  Rng rng(2);
  nn::Network q = constant_q(2, {0.1, 0.7, 0.3, 0.2});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(select_action(q, RowVector::Zero(2), 0.0, rng), 1);
}

TEST(SelectAction, TiesGoToLowestIndex)
{
  Rng rng(3);
  EXPECT_EQ(select_action(constant_q(2, {1, 1, 1, 1}), RowVector::Zero(2), 0.0, rng), 0);
  EXPECT_EQ(select_action(constant_q(2, {0, 2, 2, 1}), RowVector::Zero(2), 0.0, rng), 1);
}

TEST(SelectAction, UniformWhenEpsilonOne)
{
  Rng rng(4);
  nn::Network q = constant_q(2, {0.1, 0.7, 0.3, 0.2});
  const int n = 10000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) ++counts[select_action(q, RowVector::Zero(2), 1.0, rng)];
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (int a = 0; a < 4; ++a) EXPECT_NEAR(counts[a] / double(n), 0.25, 3.0 * se) << "action " << a;
}

TEST(SelectAction, ArgmaxInvariantToShift)
{
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    RowVector q = RowVector::Random(4);
    const double c = 100.0 * (uniform01(rng) - 0.5);
    RowVector shifted = q.array() + c;
    EXPECT_EQ(greedy_action(q), greedy_action(shifted));
  }
}

TEST(ReplayBuffer, FifoLaw)
{
  const std::size_t cap = 50, k = 17;
  ReplayBuffer b(cap);
  for (std::size_t i = 0; i < cap + k; ++i) b.push(exp_with(static_cast<double>(i)));
  ASSERT_EQ(b.size(), cap);
  for (std::size_t i = 0; i < cap; ++i) EXPECT_EQ(b.at(i).reward, static_cast<double>(i + k));
  EXPECT_THROW(b.at(cap), std::out_of_range);
  EXPECT_THROW(ReplayBuffer(0), std::invalid_argument);
}

TEST(ReplayBuffer, SamplesAreDistinctAndUniform)
{
  ReplayBuffer b(40);
  for (int i = 0; i < 40; ++i) b.push(exp_with(i));
  Rng rng(6);
  std::vector<int> hits(40, 0);
  const int draws = 5000;
  for (int d = 0; d < draws; ++d) {
    auto idx = b.sample_indices(8, rng);
    std::set<std::size_t> uniq(idx.begin(), idx.end());
    ASSERT_EQ(uniq.size(), 8u);
    for (auto i : idx) ++hits[i];
  }
  const double p = 8.0 / 40.0, se = std::sqrt(p * (1 - p) / draws);
  for (int i = 0; i < 40; ++i) EXPECT_NEAR(hits[i] / double(draws), p, 4.0 * se);
  EXPECT_THROW(b.sample_indices(41, rng), std::invalid_argument);
}

TEST(TrainStep, UnderfullBufferIsANoOp)
{
  Rng rng(7);
  DqlConfig c;
  c.epsilon = 0.0;
  Agent agent(3, c, rng);
  const nn::Network before = agent.qnet();
  ReplayBuffer empty(100);
  EXPECT_FALSE(agent.train_step(empty, rng).has_value());
  ReplayBuffer some(100);
  for (int i = 0; i < c.batch_size - 1; ++i) some.push({RowVector::Zero(3), 0, 1.0, RowVector::Zero(3), false});
  EXPECT_FALSE(agent.train_step(some, rng).has_value());
  EXPECT_EQ(agent.updates(), 0);
  for (std::size_t i = 0; i < before.layers().size(); ++i)
    EXPECT_EQ(agent.qnet().layers()[i].weights, before.layers()[i].weights);
}

TEST(TrainStep, SingleTransitionFixedPoint)
{
  // Target network held fixed (no sync), so td_target is a constant.
  Rng rng(8);
  DqlConfig c;
  c.batch_size = 1;
  c.hidden_width = 16;
  c.target_sync = 1 << 30;
  Agent agent(3, c, rng);
  ReplayBuffer b(10);
  RowVector s(3), s2(3);
  s << 0.1, 0.5, 0.0;
  s2 << 0.4, 0.5, 1.0;
  b.push({s, 2, 1.0, s2, false});
  const double y = td_target(1.0, c.gamma, agent.target_net(), s2, false);
  for (int i = 0; i < 3000; ++i) agent.train_step(b, rng);
  EXPECT_NEAR(agent.qnet().forward(s)(0, 2), y, 1e-2);
  // Terminal transition: fixed point is the reward itself.
  Agent term(3, c, rng);
  ReplayBuffer bt(10);
  bt.push({s, 1, 0.7, s2, true});
  for (int i = 0; i < 3000; ++i) term.train_step(bt, rng);
  EXPECT_NEAR(term.qnet().forward(s)(0, 1), 0.7, 1e-2);
}

TEST(TrainStep, TargetNetworkSyncsOnInterval)
{
  Rng rng(9);
  DqlConfig c;
  c.batch_size = 1;
  c.target_sync = 5;
  c.hidden_width = 8;
  Agent agent(2, c, rng);
  ReplayBuffer b(4);
  b.push({RowVector::Zero(2), 0, 1.0, RowVector::Ones(2), false});
  const nn::Network initial = agent.target_net();
  for (int i = 0; i < 4; ++i) agent.train_step(b, rng);
  EXPECT_EQ(agent.target_net().layers()[0].weights, initial.layers()[0].weights);
  agent.train_step(b, rng);
  EXPECT_EQ(agent.target_net().layers()[0].weights, agent.qnet().layers()[0].weights);
}

TEST(Train, IdenticalLossSequenceForSeed)
{
  auto map = testutil::shipped_map();
  arena::StateCodec codec(map, 1);
  DqlConfig c;
  c.max_episodes = 20;
  c.hidden_width = 16;
  auto go = [&] {
    arena::Environment env(map, env_case(1));
    return train(env, codec, c, 3);
  };
  TrainResult a = go(), b = go();
  EXPECT_EQ(a.losses, b.losses);
  ASSERT_EQ(a.logs.size(), b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i) EXPECT_EQ(a.logs[i].iteration_rewards, b.logs[i].iteration_rewards);
}

TEST(Train, TenThousandStepsFiniteLossAndBoundedBuffer)
{
  auto map = testutil::shipped_map();
  arena::StateCodec codec(map, 1);
  arena::Environment env(map, env_case(1));
  DqlConfig c;
  c.max_episodes = 1000; // 10^4 steps
  TrainResult r = train(env, codec, c, 1);
  EXPECT_EQ(r.logs.size(), 1000u);
  EXPECT_EQ(r.losses.size(), 10000u - static_cast<std::size_t>(c.batch_size) + 1);
  for (double l : r.losses) ASSERT_TRUE(std::isfinite(l));
  EXPECT_EQ(r.buffer_size, 10000u);
  EXPECT_LE(r.max_buffer_size, 20000u);
  for (const auto& l : r.logs) {
    EXPECT_GE(l.episodic_reward, 0);
    EXPECT_LE(l.episodic_reward, 10);
  }
}

TEST(Train, BufferCapacityHolds)
{
  auto map = testutil::shipped_map();
  arena::StateCodec codec(map, 1);
  arena::Environment env(map, env_case(1));
  DqlConfig c;
  c.max_episodes = 30;
  c.hidden_width = 8;
  c.buffer_capacity = 64;
  TrainResult r = train(env, codec, c, 2);
  EXPECT_EQ(r.max_buffer_size, 64u);
  EXPECT_EQ(r.buffer_size, 64u);
}

TEST(Train, EpsilonZeroNoDataMeansNoUpdates)
{
  // A batch larger than one episode keeps the buffer underfull throughout.
  auto map = testutil::shipped_map();
  arena::StateCodec codec(map, 1);
  arena::Environment env(map, env_case(1));
  DqlConfig c;
  c.epsilon = 0.0;
  c.max_episodes = 1;
  c.batch_size = 11;
  c.hidden_width = 8;
  Rng rng(derive_seed(4, 11));
  nn::Network initial = make_qnetwork(codec.dim(), c.hidden_width, rng);
  TrainResult r = train(env, codec, c, 4);
  EXPECT_TRUE(r.losses.empty());
  EXPECT_EQ(r.qnet.layers()[0].weights, initial.layers()[0].weights);
}

TEST(Train, RealProfileMayNotConvergeButReturns)
{
  auto map = testutil::shipped_map();
  arena::StateCodec codec(map, 2);
  arena::Environment env(map, env_case(2));
  DqlConfig c;
  c.hidden_width = 16;
  c.max_episodes = 40;
  TrainResult r = train(env, codec, c, 9);
  EXPECT_EQ(r.logs.size(), 40u); // no early stop by default
  if (r.converged_at) {
    EXPECT_LT(*r.converged_at, 40u);
  }
}

TEST(Config, Validation)
{
  DqlConfig c;
  c.gamma = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = DqlConfig{};
  c.epsilon = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NO_THROW(DqlConfig{}.validate());
  Rng rng(1);
  nn::Network three = nn::Network::mlp(2, {}, 3, nn::Activation::Identity, nn::Activation::Identity, 0.0, rng);
  EXPECT_THROW(Agent(three, DqlConfig{}), std::invalid_argument);
}

TEST(Checkpoint, QnetRoundTrip)
{
  Rng rng(10);
  Agent agent(5, DqlConfig{}, rng);
  const std::string path = testing::TempDir() + "/q.ckpt";
  nn::save_checkpoint(path, agent.to_checkpoint());
  nn::Checkpoint back = nn::load_checkpoint(path);
  EXPECT_EQ(back.kind, "qnet");
  RowVector s = RowVector::Random(5);
  EXPECT_EQ(back.network.forward(s), agent.qnet().forward(s));
}
