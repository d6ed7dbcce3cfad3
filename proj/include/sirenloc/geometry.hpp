#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "sirenloc/core.hpp"

namespace sirenloc {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;

  double norm() const { return std::hypot(x, y); }
};

/// Rotates a body-frame offset (x forward, y left) into the world frame.
inline Vec2 rotate(Vec2 v, double heading) {
  const double c = std::cos(heading), s = std::sin(heading);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Vehicle pose in the world frame. Heading 0 points along +x.
struct Pose {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Time-ordered pose samples. Timestamps are strictly increasing.
struct Trajectory {
  std::vector<Pose> samples;

  bool empty() const { return samples.empty(); }
  double start() const { return samples.front().t; }
  double end() const { return samples.back().t; }
  bool covers(double t0, double t1) const {
    return !samples.empty() && t0 >= start() && t1 <= end();
  }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

inline void validate(const Trajectory& track, double max_speed = 40.0) {
  require(!track.empty(), "trajectory is empty");
  for (std::size_t i = 1; i < track.samples.size(); ++i) {
    const Pose& a = track.samples[i - 1];
    const Pose& b = track.samples[i];
    require(b.t > a.t, "trajectory timestamps must be strictly increasing");
    const double speed = (b.position() - a.position()).norm() / (b.t - a.t);
    require(speed <= max_speed * (1.0 + 1e-9), "trajectory speed exceeds limit");
  }
}

/// Pose at time t by linear interpolation between the two nearest samples.
/// Heading follows the shorter arc. No extrapolation outside the track span.
inline Pose interpolate_pose(const Trajectory& track, double t) {
  require(!track.empty(), "interpolate_pose: empty trajectory");
  require(t >= track.start() && t <= track.end(),
          "interpolate_pose: time outside trajectory span");
  const auto& s = track.samples;
  auto it = std::lower_bound(s.begin(), s.end(), t,
                             [](const Pose& p, double v) { return p.t < v; });
  if (it != s.end() && it->t == t) {
    Pose p = *it;
    p.heading = wrap_angle(p.heading);
    return p;
  }
  const Pose& b = *it;
  const Pose& a = *(it - 1);
  const double w = (t - a.t) / (b.t - a.t);
  Pose out;
  out.t = t;
  out.x = a.x + w * (b.x - a.x);
  out.y = a.y + w * (b.y - a.y);
  // weighted unit-vector average, renormalized by atan2
  const double cx = (1.0 - w) * std::cos(a.heading) + w * std::cos(b.heading);
  const double cy = (1.0 - w) * std::sin(a.heading) + w * std::sin(b.heading);
  out.heading = (cx == 0.0 && cy == 0.0) ? wrap_angle(a.heading)
                                         : wrap_angle(std::atan2(cy, cx));
  return out;
}

/// Position-only interpolation; same span rules as interpolate_pose.
inline Vec2 interpolate_position(const Trajectory& track, double t) {
  require(!track.empty() && t >= track.start() && t <= track.end(),
          "interpolate_position: time outside trajectory span");
  const auto& s = track.samples;
  auto it = std::lower_bound(s.begin(), s.end(), t,
                             [](const Pose& p, double v) { return p.t < v; });
  if (it->t == t) return it->position();
  const Pose& b = *it;
  const Pose& a = *(it - 1);
  const double w = (t - a.t) / (b.t - a.t);
  return {a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)};
}

struct RelativePosition {
  double theta = 0.0;     // radians, 0 ahead, positive to the left
  double distance = 0.0;  // meters
};

/// Bearing and range of `target` as seen from `ego`.
/// Coincident positions give theta 0, distance 0.
inline RelativePosition relative_angle_distance(const Pose& ego, const Pose& target) {
  const Vec2 d = target.position() - ego.position();
  const double dist = d.norm();
  if (dist == 0.0) return {0.0, 0.0};
  const double bearing = std::atan2(d.y, d.x);
  return {wrap_angle(bearing - ego.heading), dist};
}

}  // namespace sirenloc
