#pragma once

// Strategic-area arena: map geometry, line-of-sight, enemy detection,
// transitions and the binary visible-count reward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "combat/random.hpp"

namespace combat::arena {

using AreaId = int;

inline constexpr int kAreaCount = 30;
inline constexpr double kIntersectionEps = 1e-9;

class MapError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Rect {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool contains(Point p) const { return p.x > x && p.x < x + w && p.y > y && p.y < y + h; }
};

struct Area {
  AreaId id = 0;
  std::vector<Point> polygon;
  Point centroid;
};

// Neighbor slot order inside ArenaMap::adjacency.
enum class Direction : int { Up = 0, Down = 1, Left = 2, Right = 3 };

struct ArenaMap {
  double width = 8.0;
  double height = 5.0;
  std::vector<Rect> obstacles;
  std::vector<Area> areas;
  // adjacency[a][slot]; a slot equal to a itself means the move is blocked.
  std::vector<std::array<AreaId, 4>> adjacency;

  int area_count() const { return static_cast<int>(areas.size()); }
  bool valid_area(AreaId a) const { return a >= 0 && a < area_count(); }
  Point centroid(AreaId a) const { return areas.at(static_cast<std::size_t>(a)).centroid; }
  AreaId neighbor(AreaId a, int slot) const
  {
    return adjacency.at(static_cast<std::size_t>(a)).at(static_cast<std::size_t>(slot));
  }
};

namespace detail {

inline double cross(Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

inline double polygon_area(const std::vector<Point>& poly)
{
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % poly.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

inline bool is_convex(const std::vector<Point>& poly)
{
  if (poly.size() < 3) return false;
  int sign = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    double c = cross(poly[i], poly[(i + 1) % poly.size()], poly[(i + 2) % poly.size()]);
    if (std::abs(c) < 1e-12) continue;
    int s = c > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return sign != 0;
}

// Closed containment with a small tolerance on the edges.
inline bool in_convex_polygon(const std::vector<Point>& poly, Point p, double tol = 1e-12)
{
  int sign = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    double c = cross(poly[i], poly[(i + 1) % poly.size()], p);
    if (std::abs(c) <= tol) continue;
    int s = c > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    else if (s != sign) return false;
  }
  return true;
}

} // namespace detail

// Length of the part of segment [a, b] lying inside the closed rectangle r
// (Liang-Barsky clipping).
inline double clipped_length(Point a, Point b, const Rect& r)
{
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  double t0 = 0.0;
  double t1 = 1.0;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {a.x - r.x, r.x + r.w - a.x, a.y - r.y, r.y + r.h - a.y};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return 0.0;
      continue;
    }
    const double t = q[i] / p[i];
    if (p[i] < 0.0) t0 = std::max(t0, t);
    else t1 = std::min(t1, t);
  }
  if (t1 <= t0) return 0.0;
  return (t1 - t0) * std::hypot(dx, dy);
}

// Line of sight between area centroids: blocked iff the segment runs through
// some obstacle for more than kIntersectionEps meters.
inline bool visible(const ArenaMap& map, AreaId a, AreaId b)
{
  if (a == b) return true;
  const Point pa = map.centroid(a);
  const Point pb = map.centroid(b);
  for (const Rect& r : map.obstacles) {
    if (clipped_length(pa, pb, r) > kIntersectionEps) return false;
  }
  return true;
}

// Throws MapError naming the first violated invariant.
inline void validate(const ArenaMap& map)
{
  auto fail = [](const std::string& what) { throw MapError("invalid map: " + what); };
  if (!(map.width > 0.0) || !(map.height > 0.0)) fail("bounds must be positive");
  if (map.area_count() != kAreaCount)
    fail("area count is " + std::to_string(map.area_count()) + ", expected " + std::to_string(kAreaCount));
  if (map.adjacency.size() != map.areas.size()) fail("adjacency must list every area");
  for (const Rect& r : map.obstacles) {
    if (!(r.w > 0.0) || !(r.h > 0.0)) fail("obstacle with non-positive extent");
  }
  double covered = 0.0;
  for (int i = 0; i < map.area_count(); ++i) {
    const Area& area = map.areas[static_cast<std::size_t>(i)];
    const std::string tag = "area " + std::to_string(i);
    if (area.id != i) fail(tag + ": ids must be 0..29 in order");
    if (!detail::is_convex(area.polygon)) fail(tag + ": polygon is not convex");
    for (Point p : area.polygon) {
      if (p.x < -1e-9 || p.x > map.width + 1e-9 || p.y < -1e-9 || p.y > map.height + 1e-9)
        fail(tag + ": polygon leaves the map bounds");
    }
    if (!detail::in_convex_polygon(area.polygon, area.centroid)) fail(tag + ": centroid outside its polygon");
    for (const Rect& r : map.obstacles) {
      if (r.contains(area.centroid)) fail(tag + ": centroid inside an obstacle");
    }
    covered += std::abs(detail::polygon_area(area.polygon));
  }
  if (std::abs(covered - map.width * map.height) > 1e-6 * map.width * map.height)
    fail("areas do not tile the map (total polygon area differs from width*height)");
  // Coverage on a sample lattice; combined with the area sum this rules out overlaps.
  constexpr int kSamples = 97;
  for (int i = 0; i < kSamples; ++i) {
    for (int j = 0; j < kSamples; ++j) {
      Point p{(i + 0.5) * map.width / kSamples, (j + 0.5) * map.height / kSamples};
      bool blocked = std::any_of(map.obstacles.begin(), map.obstacles.end(),
                                 [&](const Rect& r) { return r.contains(p); });
      if (blocked) continue;
      bool owned = std::any_of(map.areas.begin(), map.areas.end(),
                               [&](const Area& a) { return detail::in_convex_polygon(a.polygon, p, 1e-9); });
      if (!owned) fail("free-space point not covered by any area");
    }
  }
  for (int a = 0; a < map.area_count(); ++a) {
    for (int slot = 0; slot < 4; ++slot) {
      AreaId b = map.neighbor(a, slot);
      if (!map.valid_area(b)) fail("adjacency of area " + std::to_string(a) + " references an unknown area");
      if (b == a) continue;
      const auto& back = map.adjacency[static_cast<std::size_t>(b)];
      if (std::find(back.begin(), back.end(), a) == back.end())
        fail("adjacency is not symmetric between areas " + std::to_string(a) + " and " + std::to_string(b));
    }
  }
}

// Uniform cols x rows partition; areas are numbered row-major from the
// bottom-left corner, SELF slots only at the map boundary.
inline ArenaMap make_grid_map(double width, double height, int cols, int rows, std::vector<Rect> obstacles)
{
  ArenaMap map;
  map.width = width;
  map.height = height;
  map.obstacles = std::move(obstacles);
  const double cw = width / cols;
  const double ch = height / rows;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Area area;
      area.id = r * cols + c;
      area.polygon = {{c * cw, r * ch}, {(c + 1) * cw, r * ch}, {(c + 1) * cw, (r + 1) * ch}, {c * cw, (r + 1) * ch}};
      area.centroid = {(c + 0.5) * cw, (r + 0.5) * ch};
      map.areas.push_back(std::move(area));
      const AreaId id = r * cols + c;
      map.adjacency.push_back({r + 1 < rows ? id + cols : id, r > 0 ? id - cols : id, c > 0 ? id - 1 : id,
                               c + 1 < cols ? id + 1 : id});
    }
  }
  return map;
}

inline nlohmann::json map_to_json(const ArenaMap& map)
{
  nlohmann::json j;
  j["width"] = map.width;
  j["height"] = map.height;
  j["obstacles"] = nlohmann::json::array();
  for (const Rect& r : map.obstacles) j["obstacles"].push_back({{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}});
  j["areas"] = nlohmann::json::array();
  for (const Area& a : map.areas) {
    nlohmann::json poly = nlohmann::json::array();
    for (Point p : a.polygon) poly.push_back({p.x, p.y});
    j["areas"].push_back({{"id", a.id}, {"polygon", poly}, {"centroid", {a.centroid.x, a.centroid.y}}});
  }
  j["adjacency"] = nlohmann::json::object();
  for (std::size_t i = 0; i < map.adjacency.size(); ++i) j["adjacency"][std::to_string(i)] = map.adjacency[i];
  return j;
}

inline ArenaMap map_from_json(const nlohmann::json& j)
{
  ArenaMap map;
  try {
    map.width = j.at("width").get<double>();
    map.height = j.at("height").get<double>();
    for (const auto& o : j.at("obstacles"))
      map.obstacles.push_back({o.at("x").get<double>(), o.at("y").get<double>(), o.at("w").get<double>(),
                               o.at("h").get<double>()});
    for (const auto& a : j.at("areas")) {
      Area area;
      area.id = a.at("id").get<int>();
      for (const auto& p : a.at("polygon")) area.polygon.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      area.centroid = {a.at("centroid").at(0).get<double>(), a.at("centroid").at(1).get<double>()};
      map.areas.push_back(std::move(area));
    }
    std::sort(map.areas.begin(), map.areas.end(), [](const Area& a, const Area& b) { return a.id < b.id; });
    const auto& adj = j.at("adjacency");
    map.adjacency.resize(map.areas.size());
    for (std::size_t i = 0; i < map.areas.size(); ++i) {
      const auto& slots = adj.at(std::to_string(i));
      if (slots.size() != 4) throw MapError("invalid map: adjacency of area " + std::to_string(i) + " needs 4 slots");
      for (std::size_t s = 0; s < 4; ++s) map.adjacency[i][s] = slots.at(s).get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("map parse error: ") + e.what());
  }
  validate(map);
  return map;
}

inline ArenaMap load_map(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw MapError("cannot open map file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw MapError("map parse error in " + path + ": " + e.what());
  }
  return map_from_json(j);
}

struct State {
  AreaId own = 0;
  std::vector<AreaId> enemies;
  int visible_count = 0;

  bool operator==(const State&) const = default;
};

struct EnvConfig {
  int n_enemies = 2;
  int target_n = 2;
  std::vector<AreaId> true_enemy_areas;
  AreaId start_area = 0;
  std::vector<AreaId> initial_assumed_enemy_areas;
  int horizon = 10;
  double detection_miss_prob = 0.0;
  std::uint64_t rng_seed = 0;

  void validate(const ArenaMap& map) const
  {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid env config: " + what); };
    if (n_enemies < 1 || n_enemies > 2) fail("n_enemies must be 1 or 2");
    if (target_n < 0 || target_n > n_enemies) fail("target_n must lie in [0, n_enemies]");
    if (horizon < 1) fail("horizon must be >= 1");
    if (!(detection_miss_prob >= 0.0 && detection_miss_prob < 1.0)) fail("detection_miss_prob must lie in [0, 1)");
    if (static_cast<int>(true_enemy_areas.size()) != n_enemies) fail("true_enemy_areas needs one entry per enemy");
    if (static_cast<int>(initial_assumed_enemy_areas.size()) != n_enemies)
      fail("initial_assumed_enemy_areas needs one entry per enemy");
    if (!map.valid_area(start_area)) fail("start_area out of range");
    for (AreaId a : true_enemy_areas)
      if (!map.valid_area(a)) fail("enemy area out of range");
    for (AreaId a : initial_assumed_enemy_areas)
      if (!map.valid_area(a)) fail("assumed enemy area out of range");
  }
};

// Continuous actions in [0, 4) map to neighbor slots by flooring.
inline int discretize(double u)
{
  constexpr double kUpper = 4.0 - 1e-6;
  if (std::isnan(u)) throw std::invalid_argument("action is NaN");
  return static_cast<int>(std::floor(std::clamp(u, 0.0, kUpper)));
}

class Action {
public:
  static Action discrete(int slot)
  {
    if (slot < 0 || slot > 3) throw std::invalid_argument("discrete action must be in {0,1,2,3}");
    return Action(slot, static_cast<double>(slot), false);
  }
  static Action continuous(double u) { return Action(discretize(u), u, true); }

  int slot() const { return slot_; }
  double value() const { return value_; }
  bool is_continuous() const { return continuous_; }

private:
  Action(int slot, double value, bool continuous) : slot_(slot), value_(value), continuous_(continuous) {}
  int slot_;
  double value_;
  bool continuous_;
};

struct Detection {
  int visible_count = 0;
  std::vector<AreaId> estimates;
};

// A visible enemy that is not dropped by a false negative reports its true
// area; otherwise the previous estimate is carried over.
inline Detection detect_enemies(const ArenaMap& map, AreaId robot_area, const std::vector<AreaId>& true_enemy_areas,
                                const std::vector<AreaId>& prev_estimates, double miss_prob, Rng& rng)
{
  if (prev_estimates.size() != true_enemy_areas.size())
    throw std::invalid_argument("detect_enemies: one previous estimate per enemy required");
  Detection d;
  d.estimates = prev_estimates;
  for (std::size_t i = 0; i < true_enemy_areas.size(); ++i) {
    if (!visible(map, robot_area, true_enemy_areas[i])) continue;
    if (miss_prob > 0.0 && uniform01(rng) < miss_prob) continue;
    d.estimates[i] = true_enemy_areas[i];
    ++d.visible_count;
  }
  return d;
}

inline int reward_fn(const State& s, int target_n) { return s.visible_count == target_n ? 1 : 0; }

struct StepResult {
  State state;
  int reward = 0;
};

class Environment {
public:
  Environment(std::shared_ptr<const ArenaMap> map, EnvConfig config)
      : map_(std::move(map)), config_(std::move(config)), rng_(config_.rng_seed)
  {
    if (!map_) throw std::invalid_argument("Environment requires a map");
    config_.validate(*map_);
  }

  const ArenaMap& map() const { return *map_; }
  const EnvConfig& config() const { return config_; }
  int horizon() const { return config_.horizon; }

  State reset()
  {
    State s;
    s.own = config_.start_area;
    Detection d = detect_enemies(*map_, s.own, config_.true_enemy_areas, config_.initial_assumed_enemy_areas,
                                 config_.detection_miss_prob, rng_);
    s.enemies = std::move(d.estimates);
    s.visible_count = d.visible_count;
    return s;
  }

  StepResult step(const State& state, const Action& action)
  {
    if (!map_->valid_area(state.own)) throw std::invalid_argument("state position out of range");
    StepResult out;
    out.state.own = map_->neighbor(state.own, action.slot());
    Detection d = detect_enemies(*map_, out.state.own, config_.true_enemy_areas, state.enemies,
                                 config_.detection_miss_prob, rng_);
    out.state.enemies = std::move(d.estimates);
    out.state.visible_count = d.visible_count;
    out.reward = reward_fn(out.state, config_.target_n);
    return out;
  }

private:
  std::shared_ptr<const ArenaMap> map_;
  EnvConfig config_;
  Rng rng_;
};

// Continuous embedding shared by the dynamics model, the policy and the
// Q-network: normalized centroid per area slot plus the normalized count.
class StateCodec {
public:
  StateCodec(std::shared_ptr<const ArenaMap> map, int n_enemies) : map_(std::move(map)), n_enemies_(n_enemies)
  {
    if (!map_) throw std::invalid_argument("StateCodec requires a map");
    if (n_enemies_ < 1) throw std::invalid_argument("StateCodec requires at least one enemy");
  }

  int dim() const { return 2 * (1 + n_enemies_) + 1; }
  int n_enemies() const { return n_enemies_; }
  // Index of the normalized visible-count coordinate.
  int count_index() const { return dim() - 1; }

  Eigen::RowVectorXd encode(const State& s) const
  {
    if (static_cast<int>(s.enemies.size()) != n_enemies_)
      throw std::invalid_argument("encode: state has the wrong number of enemy estimates");
    Eigen::RowVectorXd v(dim());
    put(v, 0, s.own);
    for (int i = 0; i < n_enemies_; ++i) put(v, 2 * (i + 1), s.enemies[static_cast<std::size_t>(i)]);
    v(count_index()) = static_cast<double>(s.visible_count) / n_enemies_;
    return v;
  }

  State decode(const Eigen::RowVectorXd& v) const
  {
    if (v.size() != dim()) throw std::invalid_argument("decode: wrong vector length");
    if (!v.allFinite()) throw std::invalid_argument("decode: non-finite vector");
    State s;
    s.own = nearest(v(0), v(1));
    for (int i = 0; i < n_enemies_; ++i) s.enemies.push_back(nearest(v(2 * (i + 1)), v(2 * (i + 1) + 1)));
    s.visible_count = static_cast<int>(std::lround(std::clamp(v(count_index()) * n_enemies_, 0.0, double(n_enemies_))));
    return s;
  }

private:
  void put(Eigen::RowVectorXd& v, int at, AreaId a) const
  {
    Point c = map_->centroid(a);
    v(at) = c.x / map_->width;
    v(at + 1) = c.y / map_->height;
  }

  AreaId nearest(double nx, double ny) const
  {
    AreaId best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const Area& a : map_->areas) {
      double dx = a.centroid.x / map_->width - nx;
      double dy = a.centroid.y / map_->height - ny;
      double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = a.id;
      }
    }
    return best;
  }

  std::shared_ptr<const ArenaMap> map_;
  int n_enemies_;
};

// Brute force over all areas: every area whose visible-enemy count equals target_n.
inline std::vector<AreaId> oracle_optimal_areas(const ArenaMap& map, const std::vector<AreaId>& true_enemy_areas,
                                                int target_n)
{
  std::vector<AreaId> out;
  for (AreaId a = 0; a < map.area_count(); ++a) {
    int seen = 0;
    for (AreaId e : true_enemy_areas) seen += visible(map, a, e) ? 1 : 0;
    if (seen == target_n) out.push_back(a);
  }
  return out;
}

} // namespace combat::arena
