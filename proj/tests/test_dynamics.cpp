#include <gtest/gtest.h>

#include "combat/dynamics.hpp"
#include "combat/pilco.hpp"

using namespace combat;
using namespace combat::bnn;
using nn::Tape;

namespace {

DynamicsConfig small_config(double dropout = 0.1) { return {{32, 32}, dropout}; }

RowVector random_row(Eigen::Index n, Rng& rng, double lo = 0.0, double hi = 1.0)
{
  RowVector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = lo + (hi - lo) * uniform01(rng);
  return v;
}

TransitionDataset make_dataset(int n, const RowVector& shift, Rng& rng)
{
  TransitionDataset d;
  for (int i = 0; i < n; ++i) {
    RowVector s = random_row(shift.size(), rng);
    d.append(s, 4.0 * uniform01(rng), s + shift);
  }
  return d;
}

FitConfig epochs(int n)
{
  FitConfig f;
  f.epochs = n;
  f.batch_size = 32;
  return f;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-8); }

} // namespace

TEST(Dataset, RejectsBadTransitions)
{
  TransitionDataset d;
  EXPECT_THROW(d.append(RowVector::Zero(3), 0.0, RowVector::Zero(2)), std::invalid_argument);
  d.append(RowVector::Zero(3), 1.0, RowVector::Ones(3));
  EXPECT_THROW(d.append(RowVector::Zero(2), 1.0, RowVector::Zero(2)), std::invalid_argument);
  EXPECT_THROW(d.append(RowVector::Zero(3), std::nan(""), RowVector::Zero(3)), std::invalid_argument);
  EXPECT_EQ(d.size(), 1u);
  EXPECT_EQ(d.deltas()(0, 2), 1.0);
  EXPECT_EQ(d.inputs()(0, 3), 1.0);
}

TEST(Fit, EmptyDatasetIsAnError)
{
  Rng rng(1);
  DynamicsModel m(3, small_config(), rng);
  EXPECT_THROW(fit(m, TransitionDataset{}, epochs(1), rng), std::invalid_argument);
}

TEST(Fit, IdentityDynamics)
{
  Rng rng(2);
  TransitionDataset d = make_dataset(200, RowVector::Zero(5), rng);
  DynamicsModel m(5, small_config(), rng);
  fit(m, d, epochs(100), rng);
  EXPECT_LT(evaluate_mse(m, d), 1e-3);
}

TEST(Fit, ConstantShiftHeldOut)
{
  Rng rng(3);
  RowVector c(3);
  c << 0.2, -0.1, 0.05;
  TransitionDataset train = make_dataset(200, c, rng);
  TransitionDataset held = make_dataset(100, c, rng);
  DynamicsModel m(3, small_config(), rng);
  fit(m, train, epochs(500), rng);
  EXPECT_LT(evaluate_mse(m, held), 1e-2);
}

TEST(Fit, LinearMapHeldOut)
{
  // A genuinely input-dependent target: s' = s + 0.3 * (u/4) - 0.2 * s.
  Rng rng(4);
  auto gen = [&](int n) {
    TransitionDataset d;
    for (int i = 0; i < n; ++i) {
      RowVector s = random_row(3, rng);
      const double u = 4.0 * uniform01(rng);
      d.append(s, u, s + RowVector::Constant(3, 0.3 * u / 4.0) - 0.2 * s);
    }
    return d;
  };
  TransitionDataset train = gen(300), held = gen(100);
  DynamicsModel m(3, small_config(0.05), rng);
  FitReport r = fit(m, train, epochs(500), rng);
  EXPECT_LT(evaluate_mse(m, held), 1e-2);
  // Loss trend: the last tenth of epochs is well below the first tenth.
  const auto& L = r.epoch_losses;
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += L[i];
    last += L[L.size() - 1 - i];
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(Fit, DeterministicForSeed)
{
  auto run = [] {
    Rng rng(5);
    TransitionDataset d = make_dataset(64, RowVector::Constant(3, 0.1), rng);
    DynamicsModel m(3, small_config(), rng);
    fit(m, d, epochs(10), rng);
    return m.network();
  };
  nn::Network a = run(), b = run();
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    EXPECT_EQ(a.layers()[i].weights, b.layers()[i].weights);
    EXPECT_EQ(a.layers()[i].bias, b.layers()[i].bias);
  }
}

TEST(Fit, ColdStartReinitializes)
{
  Rng rng(6);
  TransitionDataset d = make_dataset(64, RowVector::Constant(2, 0.1), rng);
  DynamicsModel m(2, small_config(), rng);
  fit(m, d, epochs(20), rng);
  FitConfig cold = epochs(0);
  cold.warm_start = false;
  const nn::Matrix before = m.network().layers()[0].weights;
  fit(m, d, cold, rng);
  EXPECT_NE(m.network().layers()[0].weights, before);
}

TEST(Masks, ShapesAndSeeds)
{
  Rng rng(7);
  DynamicsModel m(3, small_config(), rng);
  DropoutMask k10 = sample_masks(m, 10, rng);
  ASSERT_EQ(k10.layers.size(), 3u);
  EXPECT_EQ(k10.layers[0].rows(), 10);
  EXPECT_EQ(k10.layers[1].rows(), 10);
  EXPECT_THROW(sample_masks(m, 0, rng), std::invalid_argument);
  Rng a(1), b(2);
  EXPECT_NE(sample_masks(m, 10, a).layers[0], sample_masks(m, 10, b).layers[0]);
}

TEST(Propagate, NoDropoutParticlesCoincide)
{
  Rng rng(8);
  DynamicsModel m(3, small_config(0.0), rng);
  ParticleSet p{RowVector::Constant(3, 0.4).replicate(10, 1), sample_masks(m, 10, rng)};
  for (const auto& l : p.masks.layers) EXPECT_EQ(l.size(), 0);
  ParticleSet q = propagate(m, p, nn::Matrix::Constant(10, 1, 2.0));
  EXPECT_EQ(q.size(), 10);
  for (int i = 1; i < 10; ++i) EXPECT_EQ(q.particles.row(i), q.particles.row(0));
}

TEST(Propagate, ZeroWeightsLeaveParticlesUnchanged)
{
  Rng rng(9);
  DynamicsModel m(3, small_config(), rng);
  for (auto& l : m.mutable_network().mutable_layers()) {
    l.weights.setZero();
    l.bias.setZero();
  }
  nn::Matrix x = nn::Matrix::Random(6, 3);
  ParticleSet p{x, sample_masks(m, 6, rng)};
  EXPECT_EQ(propagate(m, p, nn::Matrix::Ones(6, 1)).particles, x);
}

TEST(Propagate, IdentityModelBarelyMoves)
{
  Rng rng(10);
  TransitionDataset d = make_dataset(200, RowVector::Zero(4), rng);
  DynamicsModel m(4, small_config(), rng);
  fit(m, d, epochs(100), rng);
  RowVector s = random_row(4, rng);
  ParticleSet p{s.replicate(10, 1), sample_masks(m, 10, rng)};
  nn::Matrix u(10, 1);
  for (int i = 0; i < 10; ++i) u(i, 0) = 4.0 * uniform01(rng);
  ParticleSet q = propagate(m, p, u);
  const double disp = (q.particles - p.particles).rowwise().norm().mean();
  EXPECT_LT(disp, 0.05);
}

TEST(Propagate, NonFiniteIsAnError)
{
  Rng rng(11);
  DynamicsModel m(2, small_config(), rng);
  nn::Matrix x = nn::Matrix::Zero(3, 2);
  x(1, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(propagate(m, ParticleSet{x, sample_masks(m, 3, rng)}, nn::Matrix::Zero(3, 1)), std::runtime_error);
}

TEST(Propagate, SpreadGrowsOffDistribution)
{
  Rng rng(12);
  RowVector c = RowVector::Constant(3, 0.1);
  TransitionDataset d = make_dataset(200, c, rng);
  DynamicsModel m(3, small_config(0.2), rng);
  fit(m, d, epochs(200), rng);
  auto spread = [&](double lo, double hi) {
    double acc = 0.0;
    const int points = 20, K = 200;
    for (int i = 0; i < points; ++i) {
      RowVector s = random_row(3, rng, lo, hi);
      ParticleSet p{s.replicate(K, 1), sample_masks(m, K, rng)};
      nn::Matrix out = propagate(m, p, nn::Matrix::Constant(K, 1, 2.0)).particles;
      nn::Matrix centered = out.rowwise() - out.colwise().mean();
      acc += centered.array().square().mean();
    }
    return acc / points;
  };
  const double inside = spread(0.0, 1.0);
  const double far = spread(5.0, 6.0);
  EXPECT_GT(far, inside) << "inside " << inside << " far " << far;
}

TEST(MomentMatch, IdenticalParticlesStayIdentical)
{
  nn::Matrix x = RowVector::Constant(3, 0.7).replicate(5, 1);
  Rng rng(13);
  nn::Matrix y = moment_match(x, rng);
  EXPECT_LT((y - x).cwiseAbs().maxCoeff(), 1e-5); // sd floor is 1e-6
}

TEST(MomentMatch, MeanPreservedWithinThreeSe)
{
  Rng rng(14);
  const int K = 10, reps = 2000;
  nn::Matrix x(K, 2);
  for (int i = 0; i < K; ++i) x.row(i) = random_row(2, rng, -1.0, 1.0);
  const RowVector mu = x.colwise().mean();
  const RowVector sd = ((x.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  RowVector acc = RowVector::Zero(2);
  for (int r = 0; r < reps; ++r) acc += moment_match(x, rng).colwise().mean();
  acc /= reps;
  for (int c = 0; c < 2; ++c) EXPECT_NEAR(acc(c), mu(c), 3.0 * sd(c) / std::sqrt(double(K) * reps));
}

TEST(MomentMatch, FixedNoiseIsReproducible)
{
  nn::Matrix x = nn::Matrix::Random(4, 3);
  Rng a(15), b(15);
  EXPECT_EQ(moment_match(x, a), moment_match(x, b));
  EXPECT_THROW(moment_match(nn::Matrix::Zero(1, 3), a), std::invalid_argument);
}

TEST(MomentMatch, TapeValueMatchesDirect)
{
  Rng rng(16);
  nn::Matrix x = nn::Matrix::Random(6, 3);
  nn::Matrix noise = gaussian_noise(6, 3, rng);
  Tape t;
  EXPECT_LT((moment_match(t.constant(x), noise).value() - moment_match(x, noise)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Differentiability, ActionsThroughPropagateAndMomentMatch)
{
  Rng rng(17);
  DynamicsModel m(3, {{16, 16}, 0.1}, rng);
  TransitionDataset d = make_dataset(50, RowVector::Constant(3, 0.05), rng);
  fit(m, d, epochs(5), rng);
  const int K = 6;
  DropoutMask masks = sample_masks(m, K, rng);
  nn::Matrix noise1 = gaussian_noise(K, 3, rng), noise2 = gaussian_noise(K, 3, rng);
  nn::Matrix x0 = nn::Matrix::Random(K, 3) * 0.2;
  x0.array() += 0.5;
  nn::Matrix u0(K, 1);
  for (int i = 0; i < K; ++i) u0(i, 0) = 0.5 + 3.0 * uniform01(rng);

  auto graph = [&](Tape& t, const nn::Var& u) {
    nn::BoundNetwork b = m.network().bind(t, false);
    nn::Var x = propagate(m, b, t.constant(x0), u, masks);
    x = moment_match(x, noise1);
    x = propagate(m, b, x, u, masks);
    x = moment_match(x, noise2);
    return nn::sum(nn::square(x));
  };
  Tape t;
  nn::Var u = t.parameter(u0);
  t.backward(graph(t, u));
  const nn::Matrix g = u.grad();
  const double h = 1e-5;
  for (int i = 0; i < K; ++i) {
    nn::Matrix up = u0, um = u0;
    up(i, 0) += h;
    um(i, 0) -= h;
    Tape tp, tm;
    const double fd = (graph(tp, tp.constant(up)).value()(0, 0) - graph(tm, tm.constant(um)).value()(0, 0)) / (2 * h);
    EXPECT_LT(rel_err(fd, g(i, 0)), 1e-3) << "particle " << i << ": " << fd << " vs " << g(i, 0);
  }
}

TEST(Differentiability, ModelInputGradientAllLayers)
{
  Rng rng(18);
  DynamicsModel m(2, {{8, 8}, 0.0}, rng);
  TransitionDataset d = make_dataset(40, RowVector::Constant(2, 0.05), rng);
  fit(m, d, epochs(3), rng);
  nn::Matrix s0 = nn::Matrix::Random(3, 2);
  auto f = [&](Tape& t, const nn::Var& s) {
    nn::BoundNetwork b = m.network().bind(t, false);
    return nn::sum(nn::square(m.predict_delta(b, s, t.constant(nn::Matrix::Constant(3, 1, 1.5)))));
  };
  Tape t;
  nn::Var s = t.parameter(s0);
  t.backward(f(t, s));
  for (Eigen::Index i = 0; i < s0.size(); ++i) {
    nn::Matrix p = s0, q = s0;
    p.data()[i] += 1e-5;
    q.data()[i] -= 1e-5;
    Tape tp, tq;
    const double fd = (f(tp, tp.constant(p)).value()(0, 0) - f(tq, tq.constant(q)).value()(0, 0)) / 2e-5;
    EXPECT_LT(rel_err(fd, s.grad().data()[i]), 1e-4);
  }
}

TEST(Checkpoint, DynamicsRoundTrip)
{
  Rng rng(19);
  TransitionDataset d = make_dataset(30, RowVector::Constant(3, 0.1), rng);
  DynamicsModel m(3, small_config(), rng);
  fit(m, d, epochs(2), rng);
  const std::string path = testing::TempDir() + "/dyn.ckpt";
  nn::save_checkpoint(path, m.to_checkpoint());
  DynamicsModel back = DynamicsModel::from_checkpoint(nn::load_checkpoint(path));
  nn::Matrix x = nn::Matrix::Random(4, 3), u = nn::Matrix::Ones(4, 1);
  EXPECT_EQ(back.predict_delta(x, u), m.predict_delta(x, u));
  EXPECT_EQ(back.config().hidden, small_config().hidden);
  EXPECT_THROW(DynamicsModel::from_checkpoint({"policy", m.network(), {}}), nn::CheckpointError);
}
