#pragma once

// Dropout-network transition model. Predicts standardized state deltas from
// (state, action) and propagates particle sets, one fixed dropout mask per
// particle, optionally followed by moment matching.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "combat/checkpoint.hpp"
#include "combat/network.hpp"
#include "combat/optimizer.hpp"
#include "combat/random.hpp"
#include "combat/tape.hpp"

namespace combat::bnn {

using nn::DropoutMask;
using nn::Matrix;
using nn::RowVector;
using nn::Var;

inline constexpr double kVarianceFloor = 1e-12;

struct Transition {
  RowVector state;
  double action = 0.0;
  RowVector next_state;
};

// Append-only record of observed transitions.
class TransitionDataset {
public:
  void append(const RowVector& state, double action, const RowVector& next_state)
  {
    if (state.size() != next_state.size()) throw std::invalid_argument("transition: state dimensions differ");
    if (!records_.empty() && state.size() != state_dim())
      throw std::invalid_argument("transition: dimension differs from earlier records");
    if (!state.allFinite() || !next_state.allFinite() || !std::isfinite(action))
      throw std::invalid_argument("transition: non-finite values");
    records_.push_back({state, action, next_state});
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  Eigen::Index state_dim() const { return records_.empty() ? 0 : records_.front().state.size(); }
  const std::vector<Transition>& records() const { return records_; }

  // Rows of (state, action).
  Matrix inputs() const
  {
    Matrix x(static_cast<Eigen::Index>(size()), state_dim() + 1);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      x.row(r).head(state_dim()) = records_[i].state;
      x(r, state_dim()) = records_[i].action;
    }
    return x;
  }

  Matrix deltas() const
  {
    Matrix y(static_cast<Eigen::Index>(size()), state_dim());
    for (std::size_t i = 0; i < records_.size(); ++i)
      y.row(static_cast<Eigen::Index>(i)) = records_[i].next_state - records_[i].state;
    return y;
  }

private:
  std::vector<Transition> records_;
};

// Per-column affine standardization; constant columns keep unit scale.
struct Standardizer {
  RowVector mean;
  RowVector scale;

  static Standardizer identity(Eigen::Index dim) { return {RowVector::Zero(dim), RowVector::Ones(dim)}; }

  static Standardizer fit(const Matrix& data)
  {
    Standardizer s;
    s.mean = data.colwise().mean();
    Matrix centered = data.rowwise() - s.mean;
    s.scale = (centered.array().square().colwise().sum() / static_cast<double>(data.rows())).sqrt().matrix();
    for (Eigen::Index i = 0; i < s.scale.size(); ++i)
      if (s.scale(i) < 1e-6) s.scale(i) = 1.0;
    return s;
  }

  Matrix normalize(const Matrix& x) const
  {
    return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  }

  Matrix denormalize(const Matrix& x) const
  {
    return ((x.array().rowwise() * scale.array()).matrix().rowwise() + mean);
  }

  Var normalize(const Var& x) const
  {
    nn::Tape& t = x.tape();
    RowVector inv = scale.cwiseInverse();
    return nn::mul_row(nn::add_row(x, t.constant(-mean)), t.constant(inv));
  }

  Var denormalize(const Var& x) const
  {
    nn::Tape& t = x.tape();
    return nn::add_row(nn::mul_row(x, t.constant(scale)), t.constant(mean));
  }
};

struct DynamicsConfig {
  std::vector<int> hidden{200, 200};
  double dropout = 0.1;
};

struct FitConfig {
  int epochs = 100;
  int batch_size = 32;
  nn::OptimizerConfig optimizer{nn::OptimizerKind::Adam, 1e-3, std::nullopt};
  double weight_decay = 0.0;
  bool warm_start = true;
};

class DynamicsModel {
public:
  DynamicsModel() = default;

  DynamicsModel(int state_dim, const DynamicsConfig& config, Rng& rng)
      : state_dim_(state_dim), config_(config),
        net_(nn::Network::mlp(state_dim + 1, config.hidden, state_dim, nn::Activation::ReLU, nn::Activation::Identity,
                              config.dropout, rng)),
        input_(Standardizer::identity(state_dim + 1)), output_(Standardizer::identity(state_dim))
  {
  }

  int state_dim() const { return state_dim_; }
  const DynamicsConfig& config() const { return config_; }
  const nn::Network& network() const { return net_; }
  nn::Network& mutable_network() { return net_; }
  const Standardizer& input_stats() const { return input_; }
  const Standardizer& output_stats() const { return output_; }
  void set_stats(Standardizer input, Standardizer output)
  {
    input_ = std::move(input);
    output_ = std::move(output);
  }

  // Fresh initialization with the same architecture (cold-start refits).
  void reinitialize(Rng& rng) { *this = DynamicsModel(state_dim_, config_, rng); }

  Matrix predict_delta(const Matrix& states, const Matrix& actions, const DropoutMask* mask = nullptr) const
  {
    check(states, actions);
    Matrix x(states.rows(), states.cols() + 1);
    x << states, actions;
    return output_.denormalize(net_.forward(input_.normalize(x), mask));
  }

  Var predict_delta(const nn::BoundNetwork& bound, const Var& states, const Var& actions,
                    const DropoutMask* mask = nullptr) const
  {
    check(states.value(), actions.value());
    Var x = nn::concat_cols(states, actions);
    return output_.denormalize(bound.forward(input_.normalize(x), mask));
  }

  nn::Checkpoint to_checkpoint() const
  {
    nn::Checkpoint c{"dynamics", net_, {}};
    c.extras["input_mean"] = input_.mean;
    c.extras["input_scale"] = input_.scale;
    c.extras["output_mean"] = output_.mean;
    c.extras["output_scale"] = output_.scale;
    return c;
  }

  static DynamicsModel from_checkpoint(const nn::Checkpoint& c)
  {
    if (c.kind != "dynamics") throw nn::CheckpointError("checkpoint kind is '" + c.kind + "', expected 'dynamics'");
    DynamicsModel m;
    m.net_ = c.network;
    m.state_dim_ = static_cast<int>(c.network.output_dim());
    try {
      m.input_ = {c.extras.at("input_mean"), c.extras.at("input_scale")};
      m.output_ = {c.extras.at("output_mean"), c.extras.at("output_scale")};
    } catch (const std::out_of_range&) {
      throw nn::CheckpointError("dynamics checkpoint lacks standardization statistics");
    }
    const auto& layers = c.network.layers();
    m.config_.hidden.clear();
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) m.config_.hidden.push_back(static_cast<int>(layers[i].out()));
    m.config_.dropout = c.network.layers().front().dropout;
    return m;
  }

private:
  void check(const Matrix& states, const Matrix& actions) const
  {
    if (states.cols() != state_dim_) throw std::invalid_argument("dynamics: state dimension mismatch");
    if (actions.cols() != 1 || actions.rows() != states.rows())
      throw std::invalid_argument("dynamics: need one action per state row");
  }

  int state_dim_ = 0;
  DynamicsConfig config_;
  nn::Network net_;
  Standardizer input_;
  Standardizer output_;
};

struct FitReport {
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
};

// Minibatch MSE on standardized deltas under freshly sampled dropout masks.
// Standardization statistics are recomputed from the dataset on every call.
inline FitReport fit(DynamicsModel& model, const TransitionDataset& data, const FitConfig& config, Rng& rng)
{
  if (data.empty()) throw std::invalid_argument("fit: empty dataset");
  if (data.state_dim() != model.state_dim()) throw std::invalid_argument("fit: dataset dimension mismatch");
  if (config.epochs < 0 || config.batch_size < 1) throw std::invalid_argument("fit: invalid epochs/batch_size");
  if (!config.warm_start) model.reinitialize(rng);

  const Matrix raw_x = data.inputs();
  const Matrix raw_y = data.deltas();
  Standardizer in = Standardizer::fit(raw_x);
  Standardizer out = Standardizer::fit(raw_y);
  model.set_stats(in, out);
  const Matrix x = in.normalize(raw_x);
  const Matrix y = out.normalize(raw_y);

  nn::Optimizer opt(config.optimizer);
  nn::Network& net = model.mutable_network();
  const auto n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index batch = std::min<Eigen::Index>(config.batch_size, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  FitReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index rows = std::min(batch, n - start);
      Matrix bx(rows, x.cols());
      Matrix by(rows, y.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        bx.row(r) = x.row(order[static_cast<std::size_t>(start + r)]);
        by.row(r) = y.row(order[static_cast<std::size_t>(start + r)]);
      }
      DropoutMask mask = net.sample_mask(rows, rng);
      nn::Tape tape;
      nn::BoundNetwork bound = net.bind(tape, true);
      Var pred = bound.forward(tape.constant(bx), &mask);
      Var loss = nn::mean(nn::square(nn::sub(pred, tape.constant(by))));
      tape.backward(loss);
      nn::Gradients g = bound.gradients();
      if (config.weight_decay > 0.0) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i].weights += config.weight_decay * net.layers()[i].weights;
      }
      opt.apply(net, std::move(g));
      total += loss.value()(0, 0);
      ++batches;
    }
    report.epoch_losses.push_back(total / batches);
  }
  report.final_loss = report.epoch_losses.empty() ? 0.0 : report.epoch_losses.back();
  return report;
}

// Mean squared error of the deterministic (mask-free) prediction.
inline double evaluate_mse(const DynamicsModel& model, const TransitionDataset& data)
{
  Matrix x = data.inputs();
  Matrix pred = model.predict_delta(x.leftCols(model.state_dim()), x.rightCols(1));
  return (pred - data.deltas()).array().square().mean();
}

// One mask set per particle, held fixed for a whole predicted rollout.
inline DropoutMask sample_masks(const DynamicsModel& model, int particles, Rng& rng)
{
  if (particles < 1) throw std::invalid_argument("sample_masks: need at least one particle");
  return model.network().sample_mask(particles, rng);
}

struct ParticleSet {
  Matrix particles; // K x state_dim
  DropoutMask masks;

  int size() const { return static_cast<int>(particles.rows()); }
};

inline Matrix gaussian_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(rng);
  return m;
}

// Fit a diagonal Gaussian to the cloud and resample with the given
// standard-normal draws: out = mean + std .* noise.
inline Matrix moment_match(const Matrix& particles, const Matrix& noise)
{
  if (particles.rows() < 2) throw std::invalid_argument("moment_match: need at least two particles");
  if (noise.rows() != particles.rows() || noise.cols() != particles.cols())
    throw std::invalid_argument("moment_match: noise shape mismatch");
  RowVector mu = particles.colwise().mean();
  Matrix centered = particles.rowwise() - mu;
  RowVector var = centered.array().square().colwise().mean().matrix();
  RowVector sd = var.cwiseMax(kVarianceFloor).cwiseSqrt();
  return (noise.array().rowwise() * sd.array()).matrix().rowwise() + mu;
}

inline Matrix moment_match(const Matrix& particles, Rng& rng)
{
  return moment_match(particles, gaussian_noise(particles.rows(), particles.cols(), rng));
}

inline Var moment_match(const Var& particles, const Matrix& noise)
{
  if (particles.rows() < 2) throw std::invalid_argument("moment_match: need at least two particles");
  if (noise.rows() != particles.rows() || noise.cols() != particles.cols())
    throw std::invalid_argument("moment_match: noise shape mismatch");
  nn::Tape& t = particles.tape();
  Var mu = nn::mean_rows(particles);
  Var centered = nn::add_row(particles, nn::scale(mu, -1.0));
  Var var = nn::mean_rows(nn::square(centered));
  Var sd = nn::sqrt(nn::clamp_min(var, kVarianceFloor));
  return nn::add_row(nn::mul_row(t.constant(noise), sd), mu);
}

// s' = s + delta(s, u; mask_i) per particle.
inline ParticleSet propagate(const DynamicsModel& model, const ParticleSet& in, const Matrix& actions)
{
  if (actions.rows() != in.particles.rows()) throw std::invalid_argument("propagate: one action per particle");
  ParticleSet out;
  out.masks = in.masks;
  out.particles = in.particles + model.predict_delta(in.particles, actions, in.masks.layers.empty() ? nullptr : &in.masks);
  if (!out.particles.allFinite()) throw std::runtime_error("propagate: non-finite particle");
  return out;
}

inline ParticleSet propagate(const DynamicsModel& model, const ParticleSet& in, const Matrix& actions,
                             const Matrix& resample_noise)
{
  ParticleSet out = propagate(model, in, actions);
  out.particles = moment_match(out.particles, resample_noise);
  return out;
}

inline Var propagate(const DynamicsModel& model, const nn::BoundNetwork& bound, const Var& particles,
                     const Var& actions, const DropoutMask& masks)
{
  Var next = nn::add(particles, model.predict_delta(bound, particles, actions, masks.layers.empty() ? nullptr : &masks));
  if (!next.value().allFinite()) throw std::runtime_error("propagate: non-finite particle");
  return next;
}

} // namespace combat::bnn
