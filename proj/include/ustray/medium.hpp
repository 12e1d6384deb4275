#pragma once

#include <cmath>
#include <sstream>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/field.hpp"

namespace ustray {

/// dB MHz^-y cm^-1  ->  Np (rad/s)^-y m^-1.
inline double alpha0_db_to_neper(double alpha0_db, double y) {
  return alpha0_db * (std::log(10.0) / 20.0) * std::pow(2.0 * pi * 1e6, -y) * 100.0;
}

inline double alpha0_neper_to_db(double alpha0_np, double y) {
  return alpha0_np / ((std::log(10.0) / 20.0) * std::pow(2.0 * pi * 1e6, -y) * 100.0);
}

class Medium {
 public:
  static constexpr double min_speed = 1000.0;
  static constexpr double max_speed = 2500.0;

  Medium() = default;

  /// alpha0 in Np (rad/s)^-y m^-1.
  Medium(ScalarField sound_speed, double c0, ScalarField alpha0, double y)
      : sound_speed_(std::move(sound_speed)), alpha0_(std::move(alpha0)), c0_(c0), y_(y) {
    if (!(sound_speed_.grid() == alpha0_.grid()))
      throw ConfigError("Medium: sound speed and absorption must share a grid");
    if (!(c0 >= min_speed && c0 <= max_speed)) throw ConfigError("Medium: background speed outside physical band");
    if (!(y >= 1.0 && y <= 2.0)) throw ConfigError("Medium: power-law exponent must lie in [1, 2]");
    for (double c : sound_speed_.coefficients())
      if (!(c >= min_speed && c <= max_speed)) {
        std::ostringstream os;
        os << "Medium: sound speed " << c << " m/s outside [" << min_speed << ", " << max_speed << "]";
        throw ConfigError(os.str());
      }
    for (double a : alpha0_.coefficients())
      if (a < 0.0) throw ConfigError("Medium: absorption must be non-negative");
  }

  static Medium homogeneous(const Grid2D& grid, double c0, double y = 2.0) {
    return Medium(ScalarField::constant(grid, c0), c0, ScalarField::constant(grid, 0.0), y);
  }

  const Grid2D& grid() const { return sound_speed_.grid(); }
  const ScalarField& sound_speed() const { return sound_speed_; }
  const ScalarField& alpha0() const { return alpha0_; }
  double c0() const { return c0_; }
  double y() const { return y_; }

  Medium with_sound_speed(ScalarField c) const { return Medium(std::move(c), c0_, alpha0_, y_); }
  Medium with_alpha0(ScalarField a) const { return Medium(sound_speed_, c0_, std::move(a), y_); }

  /// tan(πy/2), the dispersion factor; rejects the singular y = 1.
  double dispersion_factor() const {
    if (std::abs(y_ - 1.0) < 1e-6) throw ConfigError("Medium: y = 1 makes tan(pi*y/2) singular");
    return std::tan(pi * y_ / 2.0);
  }

 private:
  ScalarField sound_speed_;
  ScalarField alpha0_;
  double c0_ = 1500.0;
  double y_ = 2.0;
};

struct Wavenumber {
  double k = 0.0;      // real wavenumber (rad/m)
  double alpha = 0.0;  // absorption (Np/m)
};

/// Real wavenumber and absorption from the power-law model at x.
inline Wavenumber dispersion_wavenumber(const Medium& medium, Vec2 x, double omega) {
  if (!(omega > 0.0)) throw ConfigError("dispersion_wavenumber: omega must be positive");
  const double tan_factor = medium.dispersion_factor();
  const double c = medium.sound_speed().eval(x);
  const double alpha = medium.alpha0().eval(x) * std::pow(omega, medium.y());
  const double k = omega / c + alpha * tan_factor;
  if (!(k > 0.0)) throw NumericalError("dispersion_wavenumber: non-positive wavenumber");
  return {k, alpha};
}

/// Wavenumber control points k_ij = ω/c_ij + α0_ij ω^y tan(πy/2).
inline ScalarField wavenumber_field(const Medium& medium, double omega) {
  if (!(omega > 0.0)) throw ConfigError("wavenumber_field: omega must be positive");
  const double tan_factor = medium.dispersion_factor();
  const double wy = std::pow(omega, medium.y());
  auto c = medium.sound_speed().coefficients();
  auto a = medium.alpha0().coefficients();
  std::vector<double> k(c.size());
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = omega / c[i] + a[i] * wy * tan_factor;
  return ScalarField(medium.grid(), std::move(k));
}

/// Receiver and emitter positions on a circle.
struct TransducerRing {
  Vec2 center;
  double radius = 0.0;
  std::vector<Vec2> emitters;
  std::vector<Vec2> receivers;

  TransducerRing() = default;
  TransducerRing(Vec2 c, double r, std::vector<Vec2> e, std::vector<Vec2> rcv)
      : center(c), radius(r), emitters(std::move(e)), receivers(std::move(rcv)) {
    validate();
  }

  /// Evenly spaced elements; receivers are rotated by half a receiver pitch.
  static TransducerRing uniform(Vec2 c, double r, std::size_t n_emitters, std::size_t n_receivers,
                                double receiver_offset_fraction = 0.5) {
    std::vector<Vec2> e, rc;
    for (std::size_t i = 0; i < n_emitters; ++i)
      e.push_back(c + r * unit_from_angle(2.0 * pi * static_cast<double>(i) / static_cast<double>(n_emitters)));
    for (std::size_t j = 0; j < n_receivers; ++j)
      rc.push_back(c + r * unit_from_angle(2.0 * pi * (static_cast<double>(j) + receiver_offset_fraction) /
                                           static_cast<double>(n_receivers)));
    return TransducerRing(c, r, std::move(e), std::move(rc));
  }

  std::size_t n_emitters() const { return emitters.size(); }
  std::size_t n_receivers() const { return receivers.size(); }

  /// Polar angle of a point about the ring centre.
  double polar_angle(Vec2 p) const { return angle_of(p - center); }

  bool inside(Vec2 p) const { return distance(p, center) <= radius; }

  void validate() const {
    if (!(radius > 0.0)) throw ConfigError("TransducerRing: radius must be positive");
    if (emitters.size() < 2 || receivers.size() < 2)
      throw ConfigError("TransducerRing: need at least two emitters and two receivers");
    auto on_circle = [&](Vec2 p) { return std::abs(distance(p, center) - radius) <= 1e-12 * radius; };
    for (auto p : emitters)
      if (!on_circle(p)) throw ConfigError("TransducerRing: emitter off the circle");
    for (auto p : receivers)
      if (!on_circle(p)) throw ConfigError("TransducerRing: receiver off the circle");
  }
};

struct EllipseInclusion {
  Vec2 center;
  double semi_axis1 = 0.0;  // along the rotated first axis (m)
  double semi_axis2 = 0.0;
  double rotation = 0.0;  // rad
  double sound_speed = 1500.0;
  double alpha0_db = 0.0;  // dB MHz^-y cm^-1

  bool contains(Vec2 p) const {
    const Vec2 d = p - center;
    const double cs = std::cos(rotation), sn = std::sin(rotation);
    const double a = (cs * d.x + sn * d.y) / semi_axis1;
    const double b = (-sn * d.x + cs * d.y) / semi_axis2;
    return a * a + b * b <= 1.0;
  }

  double max_extent() const { return std::max(semi_axis1, semi_axis2); }
};

/// Rasterises ellipses onto the grid nodes; later inclusions overwrite earlier ones.
inline Medium make_phantom(const Grid2D& grid, double c0, double y, const std::vector<EllipseInclusion>& inclusions) {
  std::vector<double> c(grid.size(), c0), a(grid.size(), 0.0);
  for (const auto& inc : inclusions) {
    if (!(inc.semi_axis1 > 0.0 && inc.semi_axis2 > 0.0)) throw ConfigError("make_phantom: semi-axes must be positive");
    const double r = inc.max_extent();
    if (inc.center.x - r < grid.interior_min1() || inc.center.x + r > grid.interior_max1() ||
        inc.center.y - r < grid.interior_min2() || inc.center.y + r > grid.interior_max2())
      throw DomainError("make_phantom: inclusion extends outside the grid interior");
    if (inc.alpha0_db < 0.0) throw ConfigError("make_phantom: negative absorption");
    const double a_np = alpha0_db_to_neper(inc.alpha0_db, y);
    for (std::size_t k = 0; k < grid.size(); ++k)
      if (inc.contains(grid.node(k))) {
        c[k] = inc.sound_speed;
        a[k] = a_np;
      }
  }
  return Medium(ScalarField(grid, std::move(c)), c0, ScalarField(grid, std::move(a)), y);
}

}  // namespace ustray
