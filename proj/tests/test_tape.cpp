#include <gtest/gtest.h>

#include <functional>

#include "combat/network.hpp"
#include "combat/random.hpp"
#include "combat/tape.hpp"

using namespace combat;
using namespace combat::nn;

namespace {

using Graph = std::function<Var(Tape&, const Var&)>;

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1.0, double hi = 1.0)
{
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * uniform01(rng);
  return m;
}

double eval(const Graph& f, const Matrix& x)
{
  Tape t;
  return f(t, t.constant(x)).value()(0, 0);
}

// Central differences with h = 1e-5 against the tape gradient.
void check_gradient(const Graph& f, const Matrix& x0, double tol = 1e-4)
{
  Tape t;
  Var x = t.parameter(x0);
  Var y = f(t, x);
  t.backward(y);
  const Matrix g = x.grad();
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Matrix xp = x0, xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (eval(f, xp) - eval(f, xm)) / (2 * h);
    const double an = g.data()[i];
    const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
    EXPECT_LT(rel, tol) << "entry " << i << ": fd " << fd << " vs tape " << an;
  }
}

// Weighted sum so every output entry contributes a distinct factor.
Var reduce(Tape& t, const Var& v)
{
  Matrix w(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return sum(hadamard(v, t.constant(w)));
}

} // namespace

TEST(Tape, ForwardValues)
{
  Tape t;
  Matrix a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 0.5, -1, 2, 0;
  Var va = t.constant(a), vb = t.constant(b);
  EXPECT_TRUE(matmul(va, vb).value().isApprox(a * b));
  EXPECT_DOUBLE_EQ(sum(va).value()(0, 0), 10.0);
  EXPECT_DOUBLE_EQ(mean(va).value()(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(relu(vb).value()(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(t.constant(Matrix::Zero(1, 1))).value()(0, 0), 0.5);
  Matrix mr = mean_rows(va).value();
  EXPECT_DOUBLE_EQ(mr(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(mr(0, 1), 3.0);
  Var cc = concat_cols(va, vb);
  EXPECT_EQ(cc.cols(), 4);
  EXPECT_DOUBLE_EQ(cc.value()(1, 2), 2.0);
  EXPECT_DOUBLE_EQ(slice_cols(cc, 1, 2).value()(0, 1), 0.5);
}

TEST(Tape, BackwardNeedsScalar)
{
  Tape t;
  Var x = t.parameter(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Tape, GradientAccumulatesOverReuse)
{
  Tape t;
  Var x = t.parameter(Matrix::Constant(1, 1, 3.0));
  Var y = add(hadamard(x, x), x); // x^2 + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(Tape, ConstantsGetNoGradient)
{
  Tape t;
  Var c = t.constant(Matrix::Ones(1, 1));
  Var p = t.parameter(Matrix::Ones(1, 1));
  t.backward(sum(hadamard(c, p)));
  EXPECT_FALSE(t.requires_grad(c));
  EXPECT_DOUBLE_EQ(c.grad()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(p.grad()(0, 0), 1.0);
}

TEST(FiniteDifference, ElementwiseOps)
{
  Rng rng(1);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix other = random_matrix(3, 4, rng);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, relu(v)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, tanh(v)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, sigmoid(v)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, square(v)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, scale(v, -2.5)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, add_scalar(v, 4.0)); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, hadamard(v, t.constant(other))); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, add(v, t.constant(other))); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, sub(t.constant(other), v)); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, clamp_min(v, 0.05)); }, x);
  const Matrix pos = random_matrix(3, 4, rng, 0.2, 2.0);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, sqrt(v)); }, pos);
}

TEST(FiniteDifference, StructuralOps)
{
  Rng rng(2);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(4, 2, rng);
  const Matrix row = random_matrix(1, 4, rng);
  const Matrix other = random_matrix(3, 2, rng);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, matmul(v, t.constant(b))); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, add_row(v, t.constant(row))); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, mul_row(v, t.constant(row))); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, mean_rows(v)); }, x);
  check_gradient([](Tape&, const Var& v) { return mean(v); }, x);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, concat_cols(v, t.constant(other))); }, x);
  check_gradient([](Tape& t, const Var& v) { return reduce(t, slice_cols(v, 1, 2)); }, x);
}

TEST(FiniteDifference, RowOperandGradients)
{
  Rng rng(3);
  const Matrix a = random_matrix(5, 3, rng);
  const Matrix r = random_matrix(1, 3, rng);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, add_row(t.constant(a), v)); }, r);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, mul_row(t.constant(a), v)); }, r);
  const Matrix left = random_matrix(2, 5, rng);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, matmul(t.constant(left), v)); }, a);
}

TEST(FiniteDifference, Composite)
{
  Rng rng(4);
  const Matrix x = random_matrix(4, 3, rng);
  check_gradient(
      [](Tape& t, const Var& v) {
        Var mu = mean_rows(v);
        Var c = add_row(v, scale(mu, -1.0));
        Var sd = sqrt(clamp_min(mean_rows(square(c)), 1e-12));
        return reduce(t, mul_row(tanh(c), sd));
      },
      x);
}

TEST(FiniteDifference, EveryLayerTypeWrtInputAndParameters)
{
  Rng rng(5);
  for (Activation act : {Activation::Identity, Activation::ReLU, Activation::Tanh, Activation::ScaledSigmoid}) {
    Network net = Network::mlp(3, {6, 5}, 2, act, act, 0.0, rng, 4.0);
    const Matrix x = random_matrix(4, 3, rng);
    check_gradient([&](Tape& t, const Var& v) { return reduce(t, net.bind(t, false).forward(v)); }, x);

    // Parameter gradients of the bound network.
    Tape t;
    BoundNetwork b = net.bind(t, true);
    t.backward(reduce(t, b.forward(t.constant(x))));
    Gradients g = b.gradients();
    const double h = 1e-5;
    for (std::size_t li = 0; li < net.layers().size(); ++li) {
      for (Eigen::Index i = 0; i < net.layers()[li].weights.size(); i += 3) {
        Network p = net, m = net;
        p.mutable_layers()[li].weights.data()[i] += h;
        m.mutable_layers()[li].weights.data()[i] -= h;
        auto f = [&](const Network& n) {
          Tape tt;
          return reduce(tt, tt.constant(n.forward(x))).value()(0, 0);
        };
        const double fd = (f(p) - f(m)) / (2 * h);
        const double an = g[li].weights.data()[i];
        EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6), 1e-4)
            << to_string(act) << " layer " << li << " w" << i;
      }
      for (Eigen::Index i = 0; i < net.layers()[li].bias.size(); ++i) {
        Network p = net, m = net;
        p.mutable_layers()[li].bias(i) += h;
        m.mutable_layers()[li].bias(i) -= h;
        auto f = [&](const Network& n) {
          Tape tt;
          return reduce(tt, tt.constant(n.forward(x))).value()(0, 0);
        };
        const double fd = (f(p) - f(m)) / (2 * h);
        const double an = g[li].bias(i);
        EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6), 1e-4)
            << to_string(act) << " layer " << li << " b" << i;
      }
    }
  }
}

TEST(FiniteDifference, DropoutMaskedForward)
{
  Rng rng(6);
  Network net = Network::mlp(3, {8}, 2, Activation::ReLU, Activation::Identity, 0.3, rng);
  const Matrix x = random_matrix(5, 3, rng);
  DropoutMask mask = net.sample_mask(5, rng);
  check_gradient([&](Tape& t, const Var& v) { return reduce(t, net.bind(t, false).forward(v, &mask)); }, x);
}
