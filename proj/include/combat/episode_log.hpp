#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "combat/arena.hpp"

namespace combat {

struct EpisodeLog {
  int episode = 0; // 1-based
  std::vector<int> iteration_rewards;
  int episodic_reward = 0;
  double compute_seconds = 0.0;
  double modeled_wall_seconds = 0.0;
  // Robot area after each iteration; not part of the CSV.
  std::vector<arena::AreaId> positions;
};

// Index of the first episode that starts a run of `patience` consecutive
// episodic rewards >= threshold; nullopt if no such run exists.
inline std::optional<std::size_t> detect_convergence(const std::vector<double>& rewards, double threshold = 8.0,
                                                     int patience = 3)
{
  if (patience < 1) throw std::invalid_argument("detect_convergence: patience must be >= 1");
  const auto need = static_cast<std::size_t>(patience);
  std::size_t run = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    run = rewards[i] >= threshold ? run + 1 : 0;
    if (run == need) return i + 1 - need;
  }
  return std::nullopt;
}

inline std::optional<std::size_t> detect_convergence(const std::vector<EpisodeLog>& logs, double threshold = 8.0,
                                                     int patience = 3)
{
  std::vector<double> r;
  r.reserve(logs.size());
  for (const EpisodeLog& l : logs) r.push_back(l.episodic_reward);
  return detect_convergence(r, threshold, patience);
}

// Trailing rolling mean; the first window-1 entries average what is available.
inline std::vector<double> rolling_mean(const std::vector<double>& v, int window)
{
  if (window < 1) throw std::invalid_argument("rolling_mean: window must be >= 1");
  std::vector<double> out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= static_cast<std::size_t>(window)) acc -= v[i - static_cast<std::size_t>(window)];
    const std::size_t n = std::min<std::size_t>(i + 1, static_cast<std::size_t>(window));
    out[i] = acc / static_cast<double>(n);
  }
  return out;
}

} // namespace combat
