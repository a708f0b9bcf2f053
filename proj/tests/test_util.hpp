#pragma once

#include <cmath>

#include "eqtrack/geometry.hpp"
#include "eqtrack/rng.hpp"

namespace testutil {

inline eqtrack::geometry::TrackXYCS random_unit_line(eqtrack::rng::Stream& rs) {
  eqtrack::geometry::TrackXYCS t;
  t.x = rs.uniform(0.0, 1.0);
  t.y = rs.uniform(0.0, 1.0);
  const double phi = rs.uniform(0.0, 2.0 * eqtrack::geometry::kPi);
  t.c = std::cos(phi);
  t.s = std::sin(phi);
  return t;
}

// perpendicular distance from a point to the (infinite) line of a track
inline double point_line_distance(const eqtrack::geometry::TrackXYCS& t, double px, double py) {
  const double phi = eqtrack::geometry::phi_of(t);
  return std::abs(-std::sin(phi) * (px - t.x) + std::cos(phi) * (py - t.y));
}

inline double wrap_angle(double a) {
  const double tau = 2.0 * eqtrack::geometry::kPi;
  a = std::fmod(a, tau);
  if (a < 0) a += tau;
  return a;
}

// distance between two angles on the circle, in [0, pi]
inline double angle_distance(double a, double b) {
  const double d = wrap_angle(a - b);
  return std::min(d, 2.0 * eqtrack::geometry::kPi - d);
}

}  // namespace testutil
