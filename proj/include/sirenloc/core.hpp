#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sirenloc {

inline constexpr int kSampleRate = 48000;
inline constexpr int kNumChannels = 8;
inline constexpr double kSpeedOfSound = 343.0;
inline constexpr double kMinRange = 1.0;
inline constexpr double kPi = std::numbers::pi;

/// Raised when a caller violates an operation's preconditions.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for failures that are not the caller's fault (I/O, divergence).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * kPi);
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

inline double deg(double rad) { return rad * 180.0 / kPi; }
inline double rad(double degrees) { return degrees * kPi / 180.0; }

}  // namespace sirenloc
