#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "combat/network.hpp"

namespace combat::nn {

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  std::optional<double> clip_norm;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class Optimizer {
public:
  explicit Optimizer(OptimizerConfig config) : config_(config)
  {
    if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (config_.clip_norm && !(*config_.clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
  }

  const OptimizerConfig& config() const { return config_; }
  long steps() const { return t_; }

  // Validates, clips to the global norm, then applies the update rule.
  void apply(Network& net, Gradients grads)
  {
    auto& layers = net.mutable_layers();
    if (grads.size() != layers.size()) throw std::invalid_argument("gradient/network layer count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].weights.rows() != layers[i].weights.rows() || grads[i].weights.cols() != layers[i].weights.cols() ||
          grads[i].bias.size() != layers[i].bias.size())
        throw std::invalid_argument("gradient shape mismatch at layer " + std::to_string(i));
      if (!grads[i].weights.allFinite())
        throw NonFiniteGradient("non-finite gradient in layer " + std::to_string(i) + " weights");
      if (!grads[i].bias.allFinite())
        throw NonFiniteGradient("non-finite gradient in layer " + std::to_string(i) + " bias");
    }
    if (config_.clip_norm) {
      const double norm = global_norm(grads);
      if (norm > *config_.clip_norm) {
        const double s = *config_.clip_norm / norm;
        for (auto& g : grads) {
          g.weights *= s;
          g.bias *= s;
        }
      }
    }
    ++t_;
    if (config_.kind == OptimizerKind::SGD) {
      for (std::size_t i = 0; i < grads.size(); ++i) {
        layers[i].weights -= config_.learning_rate * grads[i].weights;
        layers[i].bias -= config_.learning_rate * grads[i].bias;
      }
      return;
    }
    if (m_.empty()) {
      m_ = net.zero_gradients();
      v_ = net.zero_gradients();
    }
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double lr = config_.learning_rate;
    const double eps = config_.epsilon;
    auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    for (std::size_t i = 0; i < grads.size(); ++i) {
      update(layers[i].weights, grads[i].weights, m_[i].weights, v_[i].weights);
      update(layers[i].bias, grads[i].bias, m_[i].bias, v_[i].bias);
    }
  }

private:
  OptimizerConfig config_;
  long t_ = 0;
  Gradients m_;
  Gradients v_;
};

} // namespace combat::nn
