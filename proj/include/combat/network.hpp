#pragma once

// Small fully connected networks with per-layer dropout. A network can be
// evaluated directly on a batch or recorded on a Tape for differentiation.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "combat/random.hpp"
#include "combat/tape.hpp"

namespace combat::nn {

enum class Activation : int { Identity = 0, ReLU = 1, Tanh = 2, ScaledSigmoid = 3 };

inline const char* to_string(Activation a)
{
  switch (a) {
  case Activation::Identity: return "identity";
  case Activation::ReLU: return "relu";
  case Activation::Tanh: return "tanh";
  case Activation::ScaledSigmoid: return "scaled_sigmoid";
  }
  return "?";
}

struct Layer {
  Matrix weights; // in x out
  RowVector bias; // 1 x out
  Activation activation = Activation::Identity;
  double dropout = 0.0; // applied to this layer's output
  double scale = 1.0;   // output range of ScaledSigmoid is [0, scale)

  Eigen::Index in() const { return weights.rows(); }
  Eigen::Index out() const { return weights.cols(); }
};

// One binary mask per layer (empty for layers without dropout), each
// rows x width, entries 0 or 1/(1-p).
struct DropoutMask {
  std::vector<Matrix> layers;
};

struct LayerGradient {
  Matrix weights;
  RowVector bias;
};

using Gradients = std::vector<LayerGradient>;

inline Matrix activate(Activation act, const Matrix& x, double scale)
{
  switch (act) {
  case Activation::Identity: return x;
  case Activation::ReLU: return x.cwiseMax(0.0);
  case Activation::Tanh: return x.array().tanh().matrix();
  case Activation::ScaledSigmoid: {
    // Stays strictly below scale even when the sigmoid saturates to 1.0.
    const double top = std::nextafter(scale, 0.0);
    return (scale * sigmoid_values(x)).cwiseMin(top);
  }
  }
  throw std::logic_error("unknown activation");
}

inline Var activate(Activation act, const Var& x, double scale)
{
  switch (act) {
  case Activation::Identity: return x;
  case Activation::ReLU: return relu(x);
  case Activation::Tanh: return tanh(x);
  case Activation::ScaledSigmoid: {
    Var s = nn::scale(sigmoid(x), scale);
    const double top = std::nextafter(scale, 0.0);
    Matrix clipped = s.value().cwiseMin(top);
    return s.tape().record(std::move(clipped), {s}, [s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(s, g); });
  }
  }
  throw std::logic_error("unknown activation");
}

class Network;

// Network parameters recorded on a tape. Trainable bindings expose
// parameter gradients after Tape::backward.
class BoundNetwork {
public:
  Var forward(const Var& input, const DropoutMask* mask = nullptr) const;
  Gradients gradients() const;
  const Network& network() const { return *net_; }

private:
  friend class Network;
  const Network* net_ = nullptr;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
};

class Network {
public:
  Network() = default;
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)) { check(); }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for every
  // weight and bias; hidden layers share one activation and dropout rate.
  static Network mlp(int input, const std::vector<int>& hidden, int output, Activation hidden_act,
                     Activation output_act, double dropout, Rng& rng, double output_scale = 1.0)
  {
    std::vector<Layer> layers;
    int fan_in = input;
    auto make = [&](int out, Activation act, double p, double s) {
      Layer l;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      l.weights.resize(fan_in, out);
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c)
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r) l.weights(r, c) = dist(rng);
      l.bias.resize(out);
      for (Eigen::Index c = 0; c < l.bias.size(); ++c) l.bias(c) = dist(rng);
      l.activation = act;
      l.dropout = p;
      l.scale = s;
      layers.push_back(std::move(l));
      fan_in = out;
    };
    for (int h : hidden) make(h, hidden_act, dropout, 1.0);
    make(output, output_act, 0.0, output_scale);
    return Network(std::move(layers));
  }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }
  Eigen::Index input_dim() const { return layers_.empty() ? 0 : layers_.front().in(); }
  Eigen::Index output_dim() const { return layers_.empty() ? 0 : layers_.back().out(); }
  bool has_dropout() const
  {
    for (const Layer& l : layers_)
      if (l.dropout > 0.0) return true;
    return false;
  }

  std::size_t parameter_count() const
  {
    std::size_t n = 0;
    for (const Layer& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
    return n;
  }

  void check() const
  {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      if (l.bias.size() != l.out()) throw std::invalid_argument("layer " + std::to_string(i) + ": bias width mismatch");
      if (i > 0 && layers_[i - 1].out() != l.in())
        throw std::invalid_argument("layer " + std::to_string(i) + ": input width does not match previous layer");
      if (!(l.dropout >= 0.0 && l.dropout < 1.0))
        throw std::invalid_argument("layer " + std::to_string(i) + ": dropout must lie in [0, 1)");
      if (!l.weights.allFinite() || !l.bias.allFinite())
        throw std::invalid_argument("layer " + std::to_string(i) + ": non-finite parameters");
    }
  }

  Matrix forward(const Matrix& input, const DropoutMask* mask = nullptr) const
  {
    if (input.cols() != input_dim()) throw std::invalid_argument("forward: input dimension mismatch");
    check_mask(mask, input.rows());
    Matrix x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      Matrix z = x * l.weights;
      z.rowwise() += l.bias;
      x = activate(l.activation, z, l.scale);
      if (mask && i < mask->layers.size() && mask->layers[i].size() > 0) x = x.cwiseProduct(mask->layers[i]);
    }
    return x;
  }

  BoundNetwork bind(Tape& tape, bool trainable) const
  {
    BoundNetwork b;
    b.net_ = this;
    for (const Layer& l : layers_) {
      b.weights_.push_back(trainable ? tape.parameter(l.weights) : tape.constant(l.weights));
      b.biases_.push_back(trainable ? tape.parameter(l.bias) : tape.constant(l.bias));
    }
    return b;
  }

  // Inverted dropout: kept units are scaled by 1/(1-p) so that the mask has
  // unit expectation.
  DropoutMask sample_mask(Eigen::Index rows, Rng& rng) const
  {
    DropoutMask m;
    for (const Layer& l : layers_) {
      if (l.dropout <= 0.0) {
        m.layers.emplace_back();
        continue;
      }
      std::bernoulli_distribution keep(1.0 - l.dropout);
      const double s = 1.0 / (1.0 - l.dropout);
      Matrix mask(rows, l.out());
      for (Eigen::Index c = 0; c < mask.cols(); ++c)
        for (Eigen::Index r = 0; r < rows; ++r) mask(r, c) = keep(rng) ? s : 0.0;
      m.layers.push_back(std::move(mask));
    }
    return m;
  }

  void check_mask(const DropoutMask* mask, Eigen::Index rows) const
  {
    if (!mask) return;
    if (mask->layers.size() > layers_.size()) throw std::invalid_argument("dropout mask has too many layers");
    for (std::size_t i = 0; i < mask->layers.size(); ++i) {
      const Matrix& m = mask->layers[i];
      if (m.size() == 0) continue;
      if (m.rows() != rows || m.cols() != layers_[i].out())
        throw std::invalid_argument("dropout mask shape mismatch at layer " + std::to_string(i));
    }
  }

  Gradients zero_gradients() const
  {
    Gradients g;
    for (const Layer& l : layers_) g.push_back({Matrix::Zero(l.in(), l.out()), RowVector::Zero(l.out())});
    return g;
  }

private:
  std::vector<Layer> layers_;
};

inline Var BoundNetwork::forward(const Var& input, const DropoutMask* mask) const
{
  if (input.cols() != net_->input_dim()) throw std::invalid_argument("forward: input dimension mismatch");
  net_->check_mask(mask, input.rows());
  Tape& tape = input.tape();
  Var x = input;
  const auto& layers = net_->layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Var z = add_row(matmul(x, weights_[i]), biases_[i]);
    x = activate(layers[i].activation, z, layers[i].scale);
    if (mask && i < mask->layers.size() && mask->layers[i].size() > 0) x = hadamard(x, tape.constant(mask->layers[i]));
  }
  return x;
}

inline Gradients BoundNetwork::gradients() const
{
  Gradients g;
  for (std::size_t i = 0; i < weights_.size(); ++i) g.push_back({weights_[i].grad(), biases_[i].grad()});
  return g;
}

inline double global_norm(const Gradients& g)
{
  double s = 0.0;
  for (const LayerGradient& l : g) s += l.weights.squaredNorm() + l.bias.squaredNorm();
  return std::sqrt(s);
}

inline void add_scaled(Gradients& acc, const Gradients& g, double c)
{
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i].weights += c * g[i].weights;
    acc[i].bias += c * g[i].bias;
  }
}

} // namespace combat::nn
