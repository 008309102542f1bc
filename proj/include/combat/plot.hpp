#pragma once

// Learning curves across seeds as SVG (reward vs episode and vs modeled
// wall-time) plus the same series as CSV. Bands are 95% t-intervals of the
// per-episode mean; a single seed gets a line only.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "combat/config.hpp"
#include "combat/episode_log.hpp"
#include "combat/harness.hpp"

namespace combat::plot {

using harness::json;
namespace fs = std::filesystem;

struct Series {
  std::string label;
  std::string algorithm;
  int seeds = 0;
  std::vector<double> mean;
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<double> wall_minutes; // mean cumulative modeled wall-time at the end of each episode
};

struct Curves {
  std::vector<Series> series;
  std::vector<std::string> warnings;
};

inline double t_quantile(int df, double p)
{
  boost::math::students_t dist(static_cast<double>(df));
  return boost::math::quantile(dist, p);
}

inline Series aggregate(const std::string& label, const std::string& algorithm,
                        const std::vector<std::vector<double>>& rewards, const std::vector<std::vector<double>>& wall)
{
  Series s;
  s.label = label;
  s.algorithm = algorithm;
  s.seeds = static_cast<int>(rewards.size());
  std::size_t len = rewards.front().size();
  for (const auto& r : rewards) len = std::min(len, r.size());
  const int n = s.seeds;
  const double t = n > 1 ? t_quantile(n - 1, 0.975) : 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    double m = 0.0, w = 0.0;
    for (int k = 0; k < n; ++k) {
      m += rewards[k][i];
      w += wall[k][i];
    }
    m /= n;
    w /= n;
    double half = 0.0;
    if (n > 1) {
      double ss = 0.0;
      for (int k = 0; k < n; ++k) ss += (rewards[k][i] - m) * (rewards[k][i] - m);
      half = t * std::sqrt(ss / (n - 1) / n);
    }
    s.mean.push_back(m);
    s.lo.push_back(m - half);
    s.hi.push_back(m + half);
    s.wall_minutes.push_back(w);
  }
  return s;
}

// Reads completed run directories. DQL series are smoothed per seed by the
// configured rolling window before aggregation.
inline Curves load_curves(const std::vector<fs::path>& run_dirs)
{
  if (run_dirs.empty()) throw harness::RunError("plot: no run directories given");
  Curves out;
  for (const fs::path& dir : run_dirs) {
    if (!fs::exists(dir / "config.json")) throw harness::RunError("plot: '" + dir.string() + "' is not a run directory");
    const harness::ExperimentConfig cfg = harness::load_config(dir / "config.json");
    std::vector<harness::SeedRecord> recs = harness::read_run_records(dir, cfg);
    std::vector<std::vector<double>> rewards, wall;
    for (const auto& r : recs) {
      if (r.episodes.empty()) continue;
      std::vector<double> rw = harness::episodic_rewards(r.episodes);
      if (cfg.algorithm == harness::Algorithm::Dql) rw = rolling_mean(rw, cfg.dql.rolling_window);
      double acc = 0.0;
      for (const auto& e : r.random_rollouts) acc += e.modeled_wall_s;
      std::vector<double> w;
      for (const auto& e : r.episodes) w.push_back((acc += e.modeled_wall_s) / 60.0);
      rewards.push_back(std::move(rw));
      wall.push_back(std::move(w));
    }
    if (rewards.empty()) throw harness::RunError("plot: '" + dir.string() + "' holds no episodes");
    std::size_t shortest = rewards.front().size(), longest = 0;
    for (const auto& r : rewards) {
      shortest = std::min(shortest, r.size());
      longest = std::max(longest, r.size());
    }
    if (shortest != longest)
      out.warnings.push_back(dir.string() + ": episode counts differ across seeds (" + std::to_string(shortest) + " to " +
                             std::to_string(longest) + "); truncated to " + std::to_string(shortest));
    std::string label = harness::to_string(cfg.algorithm) + " " + cfg.case_name + " " + harness::to_string(cfg.profile);
    if (cfg.algorithm == harness::Algorithm::Dql) label += " (rolling " + std::to_string(cfg.dql.rolling_window) + ")";
    out.series.push_back(aggregate(label, harness::to_string(cfg.algorithm), rewards, wall));
  }
  return out;
}

inline std::string curves_csv(const Curves& c)
{
  std::ostringstream os;
  os << "series,algorithm,seeds,episode,wall_min,mean,ci_low,ci_high\n";
  for (const Series& s : c.series) {
    for (std::size_t i = 0; i < s.mean.size(); ++i) {
      os << '"' << s.label << '"' << ',' << s.algorithm << ',' << s.seeds << ',' << (i + 1) << ','
         << harness::format_fixed(s.wall_minutes[i], 4) << ',' << harness::format_fixed(s.mean[i], 4) << ','
         << harness::format_fixed(s.lo[i], 4) << ',' << harness::format_fixed(s.hi[i], 4) << '\n';
    }
  }
  return os.str();
}

namespace detail {

inline const char* color(std::size_t i)
{
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  return palette[i % 7];
}

inline double nice_step(double range)
{
  const double raw = range / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

struct Panel {
  double x0, y0, w, h;
  double xmax, ymin, ymax;
  double px(double x) const { return x0 + w * x / xmax; }
  double py(double y) const { return y0 + h - h * (y - ymin) / (ymax - ymin); }
};

inline std::string num(double v) { return harness::format_fixed(v, 2); }

inline void axes(std::ostringstream& os, const Panel& p, const std::string& xlabel, const std::string& title)
{
  os << "<rect x='" << num(p.x0) << "' y='" << num(p.y0) << "' width='" << num(p.w) << "' height='" << num(p.h)
     << "' fill='none' stroke='#333'/>\n";
  const double xs = nice_step(p.xmax);
  for (double x = 0.0; x <= p.xmax + 1e-9; x += xs) {
    os << "<line x1='" << num(p.px(x)) << "' y1='" << num(p.y0 + p.h) << "' x2='" << num(p.px(x)) << "' y2='"
       << num(p.y0 + p.h + 4) << "' stroke='#333'/>";
    os << "<text x='" << num(p.px(x)) << "' y='" << num(p.y0 + p.h + 16) << "' text-anchor='middle'>"
       << (xs < 1.0 ? num(x) : std::to_string(static_cast<long>(std::lround(x)))) << "</text>\n";
  }
  for (double y = 0.0; y <= p.ymax + 1e-9; y += 2.0) {
    os << "<line x1='" << num(p.x0) << "' y1='" << num(p.py(y)) << "' x2='" << num(p.x0 + p.w) << "' y2='"
       << num(p.py(y)) << "' stroke='#ddd'/>";
    os << "<text x='" << num(p.x0 - 6) << "' y='" << num(p.py(y) + 4) << "' text-anchor='end'>" << y << "</text>\n";
  }
  os << "<text x='" << num(p.x0 + p.w / 2) << "' y='" << num(p.y0 + p.h + 34) << "' text-anchor='middle'>" << xlabel
     << "</text>\n";
  os << "<text x='" << num(p.x0 + p.w / 2) << "' y='" << num(p.y0 - 8) << "' text-anchor='middle' font-weight='bold'>"
     << title << "</text>\n";
  os << "<text transform='translate(" << num(p.x0 - 30) << "," << num(p.y0 + p.h / 2)
     << ") rotate(-90)' text-anchor='middle'>episodic reward</text>\n";
}

inline void draw(std::ostringstream& os, const Panel& p, const Series& s, const std::vector<double>& xs, const char* col)
{
  if (s.mean.empty()) return;
  if (s.seeds > 1) {
    os << "<polygon fill='" << col << "' fill-opacity='0.2' stroke='none' points='";
    for (std::size_t i = 0; i < xs.size(); ++i) os << num(p.px(xs[i])) << ',' << num(p.py(std::clamp(s.hi[i], p.ymin, p.ymax))) << ' ';
    for (std::size_t i = xs.size(); i-- > 0;) os << num(p.px(xs[i])) << ',' << num(p.py(std::clamp(s.lo[i], p.ymin, p.ymax))) << ' ';
    os << "'/>\n";
  }
  os << "<polyline fill='none' stroke='" << col << "' stroke-width='1.8' points='";
  for (std::size_t i = 0; i < xs.size(); ++i) os << num(p.px(xs[i])) << ',' << num(p.py(s.mean[i])) << ' ';
  os << "'/>\n";
}

} // namespace detail

inline std::string curves_svg(const Curves& c, double reward_max = 10.0)
{
  const double W = 1000, H = 440;
  double emax = 1, wmax = 1e-6;
  for (const Series& s : c.series) {
    emax = std::max(emax, static_cast<double>(s.mean.size()));
    if (!s.wall_minutes.empty()) wmax = std::max(wmax, s.wall_minutes.back());
  }
  detail::Panel left{70, 40, 380, 300, emax, 0, reward_max};
  detail::Panel right{560, 40, 380, 300, wmax, 0, reward_max};
  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
     << "' font-family='sans-serif' font-size='11'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  detail::axes(os, left, "episode", "reward vs episode");
  detail::axes(os, right, "modeled wall-time (min)", "reward vs modeled wall-time");
  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const Series& s = c.series[k];
    std::vector<double> ep;
    for (std::size_t i = 0; i < s.mean.size(); ++i) ep.push_back(static_cast<double>(i + 1));
    detail::draw(os, left, s, ep, detail::color(k));
    detail::draw(os, right, s, s.wall_minutes, detail::color(k));
    const double ly = 390 + 16.0 * static_cast<double>(k % 3);
    const double lx = 70 + 300.0 * static_cast<double>(k / 3);
    os << "<rect x='" << lx << "' y='" << ly - 9 << "' width='14' height='10' fill='" << detail::color(k) << "'/>";
    os << "<text x='" << lx + 20 << "' y='" << ly << "'>" << s.label << " (" << s.seeds << " seeds)</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

} // namespace combat::plot
