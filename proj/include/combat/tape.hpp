#pragma once

// Reverse-mode differentiation over dense matrices. Batches live in rows:
// a K x d matrix is K samples of dimension d.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace combat::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

class Tape;

class Var {
public:
  Var() = default;

  Tape& tape() const
  {
    assert(tape_ != nullptr);
    return *tape_;
  }
  std::size_t index() const { return index_; }
  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
public:
  // Receives the upstream gradient and this node's forward value.
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream, const Matrix& value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix value) { return push(std::move(value), true, {}); }

  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn)
  {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.index()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Matrix& value(const Var& v) const { return nodes_[v.index()].value; }

  const Matrix& grad(const Var& v) const
  {
    const Node& n = nodes_[v.index()];
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool requires_grad(const Var& v) const { return nodes_[v.index()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(const Var& v, const Matrix& g)
  {
    Node& n = nodes_[v.index()];
    if (!n.requires_grad) return;
    assert(g.rows() == n.value.rows() && g.cols() == n.value.cols());
    if (n.has_grad) n.grad += g;
    else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  // Seeds d(output)/d(output) = 1 for a 1x1 output and propagates to every
  // node that requires a gradient.
  void backward(const Var& output)
  {
    if (value(output).size() != 1) throw std::invalid_argument("backward expects a scalar output");
    for (Node& n : nodes_) n.has_grad = false;
    accumulate(output, Matrix::Ones(1, 1));
    for (std::size_t i = output.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad, n.value);
    }
  }

private:
  struct Node {
    Matrix value;
    mutable Matrix grad;
    bool requires_grad = false;
    mutable bool has_grad = false;
    BackwardFn backward;
  };

  Var push(Matrix value, bool requires_grad, BackwardFn fn)
  {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape().value(*this); }
inline const Matrix& Var::grad() const { return tape().grad(*this); }

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op)
{
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline void row_shape(const Var& a, const Var& row, const char* op)
{
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument(std::string(op) + ": row shape mismatch");
}

} // namespace detail

inline Var add(const Var& a, const Var& b)
{
  detail::same_shape(a, b, "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b)
{
  detail::same_shape(a, b, "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var hadamard(const Var& a, const Var& b)
{
  detail::same_shape(a, b, "hadamard");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

// a (N x d) + row (1 x d) broadcast over rows.
inline Var add_row(const Var& a, const Var& row)
{
  detail::row_shape(a, row, "add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

// a (N x d) .* row (1 x d) broadcast over rows.
inline Var mul_row(const Var& a, const Var& row)
{
  detail::row_shape(a, row, "mul_row");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (t.requires_grad(row)) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

inline Var matmul(const Var& a, const Var& b)
{
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  return a.tape().record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

inline Var scale(const Var& a, double c)
{
  return a.tape().record(a.value() * c, {a}, [a, c](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g * c); });
}

inline Var add_scalar(const Var& a, double c)
{
  Matrix out = a.value().array() + c;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

inline Var relu(const Var& a)
{
  return a.tape().record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
  });
}

inline Var tanh(const Var& a)
{
  Matrix out = a.value().array().tanh();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

inline Matrix sigmoid_values(const Matrix& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

inline Var sigmoid(const Var& a)
{
  return a.tape().record(sigmoid_values(a.value()), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    t.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

inline Var square(const Var& a)
{
  Matrix out = a.value().array().square();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (2.0 * g.array() * a.value().array()).matrix());
  });
}

inline Var sqrt(const Var& a)
{
  Matrix out = a.value().array().sqrt();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    t.accumulate(a, (g.array() / (2.0 * y.array())).matrix());
  });
}

// max(a, floor) elementwise; the gradient passes only where a > floor.
inline Var clamp_min(const Var& a, double floor)
{
  return a.tape().record(a.value().cwiseMax(floor), {a}, [a, floor](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (a.value().array() > floor).select(g, 0.0).matrix());
  });
}

// Column means: N x d -> 1 x d.
inline Var mean_rows(const Var& a)
{
  const double n = static_cast<double>(a.rows());
  return a.tape().record(a.value().colwise().mean(), {a}, [a, n](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = g.replicate(a.rows(), 1) / n;
    t.accumulate(a, d);
  });
}

inline Var sum(const Var& a)
{
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var concat_cols(const Var& a, const Var& b)
{
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ac = a.cols();
  const Eigen::Index bc = b.cols();
  return a.tape().record(std::move(out), {a, b}, [a, b, ac, bc](Tape& t, const Matrix& g, const Matrix&) {
    if (t.requires_grad(a)) t.accumulate(a, g.leftCols(ac));
    if (t.requires_grad(b)) t.accumulate(b, g.rightCols(bc));
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count)
{
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  return a.tape().record(a.value().middleCols(start, count), {a},
                         [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix d = Matrix::Zero(a.rows(), a.cols());
                           d.middleCols(start, count) = g;
                           t.accumulate(a, d);
                         });
}

// Operator sugar for the common cases.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

} // namespace combat::nn
