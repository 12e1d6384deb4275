#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ustray {

using cplx = std::complex<double>;

inline constexpr double pi = std::numbers::pi;

/// Planar position or direction (metres).
struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator/(double s) const { return {x / s, y / s}; }
  constexpr Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr Vec2 operator*(double s, Vec2 v) { return v * s; }
constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 v) { return std::hypot(v.x, v.y); }
inline double distance(Vec2 a, Vec2 b) { return norm(a - b); }
inline Vec2 unit_from_angle(double theta) { return {std::cos(theta), std::sin(theta)}; }
inline double angle_of(Vec2 v) { return std::atan2(v.y, v.x); }

/// Wraps an angle into [0, 2π).
inline double wrap_two_pi(double a) {
  a = std::fmod(a, 2.0 * pi);
  if (a < 0.0) a += 2.0 * pi;
  return a;
}

/// Evaluation outside the valid region of a field or geometry.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Invalid parameters or configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent input files.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure (non-finite values, lost curvature, divergence).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ustray
