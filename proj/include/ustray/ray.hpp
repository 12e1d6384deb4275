#pragma once

// Heun (second-order Runge-Kutta) integration of the ray equations
//   dx/ds = kappa / k,   dkappa/ds = grad k,
// with |kappa| renormalised to k at both stages of every step.

#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/field.hpp"
#include "ustray/medium.hpp"

namespace ustray {

struct Ray {
  double theta0 = 0.0;
  double step = 0.0;       // nominal Δs
  double first_step = 0.0; // s_1 - s_0 (equals step unless requested otherwise)
  double last_step = 0.0;  // Δs' = s_M - s_{M-1}
  std::vector<Vec2> points;
  std::vector<Vec2> tangents;  // unit direction kappa/|kappa| at each point
  std::vector<double> arc_lengths;
  std::vector<double> k_samples;  // integrand wavenumber at each point (may be empty)
  bool truncated = false;          // stopped early on leaving the field interior

  std::size_t size() const { return points.size(); }
  double length() const { return arc_lengths.empty() ? 0.0 : arc_lengths.back(); }
  Vec2 end() const { return points.back(); }
};

/// Wavenumber fields for one frequency: a smoothed map that steers the rays and
/// the unsmoothed medium used for every integral along them.
struct RayModel {
  Medium medium;
  double omega = 0.0;
  ScalarField geometry;
  int window = 1;

  static RayModel make(const Medium& m, double omega, int window) {
    RayModel rm;
    rm.medium = m;
    rm.omega = omega;
    rm.window = window;
    rm.geometry = smooth_field(wavenumber_field(m, omega), window);
    return rm;
  }
};

struct TraceOptions {
  double step = 0.0;
  std::optional<double> first_step;
  // Termination: at the ring circle (default) or at a prescribed arc length.
  std::optional<double> target_length;
  Vec2 ring_center;
  double ring_radius = 0.0;
  std::size_t max_steps = 0;  // 0 picks a bound from the geometry
};

namespace detail {

struct RayState {
  Vec2 x;
  Vec2 kappa;
};

inline void require_finite(const ValueGradient& v) {
  if (!std::isfinite(v.value) || !std::isfinite(v.gradient.x) || !std::isfinite(v.gradient.y) || !(v.value > 0.0))
    throw NumericalError("trace_ray: non-finite or non-positive wavenumber");
}

/// One Heun step of length h; returns std::nullopt when a stage leaves the interior.
inline std::optional<RayState> heun_step(const ScalarField& k, RayState st, double h) {
  const Grid2D& g = k.grid();
  if (!g.in_interior(st.x)) return std::nullopt;
  const ValueGradient a = k.eval_with_gradient(st.x);
  require_finite(a);
  Vec2 kappa = st.kappa * (a.value / norm(st.kappa));
  const Vec2 qx = kappa / a.value;
  const Vec2 qk = a.gradient;
  const Vec2 xp = st.x + h * qx;
  if (!g.in_interior(xp)) return std::nullopt;
  const ValueGradient b = k.eval_with_gradient(xp);
  require_finite(b);
  Vec2 kappap = kappa + h * qk;
  kappap = kappap * (b.value / norm(kappap));
  const Vec2 qxp = kappap / b.value;
  const Vec2 qkp = b.gradient;
  return RayState{st.x + (0.5 * h) * (qx + qxp), kappa + (0.5 * h) * (qk + qkp)};
}

inline Vec2 unit(Vec2 v) { return v / norm(v); }

}  // namespace detail

/// Traces a ray from x_start at polar angle theta0 on the geometry field.
inline Ray trace_ray(const ScalarField& k_geometry, Vec2 x_start, double theta0, const TraceOptions& opt) {
  if (!(opt.step > 0.0) || !std::isfinite(opt.step)) throw ConfigError("trace_ray: step must be positive");
  const bool ring_mode = !opt.target_length.has_value();
  if (ring_mode) {
    if (!(opt.ring_radius > 0.0)) throw ConfigError("trace_ray: ring radius required for exit termination");
    if (opt.step >= opt.ring_radius) throw ConfigError("trace_ray: step exceeds the ring radius");
  } else if (!(*opt.target_length > 0.0)) {
    throw ConfigError("trace_ray: target length must be positive");
  }
  const double h0 = opt.first_step.value_or(opt.step);
  if (!(h0 > 0.0) || h0 > opt.step * (1.0 + 1e-12)) throw ConfigError("trace_ray: first step must lie in (0, step]");

  const Vec2 dir0 = unit_from_angle(theta0);
  if (ring_mode) {
    const Vec2 rel = x_start - opt.ring_center;
    if (norm(rel) > opt.ring_radius * (1.0 - 1e-9) && dot(dir0, rel) >= 0.0)
      throw DomainError("trace_ray: initial direction leaves the ring immediately");
  }
  if (!k_geometry.grid().in_interior(x_start)) {
    std::ostringstream os;
    os << "trace_ray: start point (" << x_start.x << ", " << x_start.y << ") outside field interior";
    throw DomainError(os.str());
  }

  Ray ray;
  ray.theta0 = theta0;
  ray.step = opt.step;
  ray.first_step = h0;
  const ValueGradient k0 = k_geometry.eval_with_gradient(x_start);
  detail::require_finite(k0);
  detail::RayState st{x_start, dir0 * k0.value};
  ray.points.push_back(x_start);
  ray.tangents.push_back(dir0);
  ray.arc_lengths.push_back(0.0);

  std::size_t max_steps = opt.max_steps;
  if (max_steps == 0) {
    const double span = ring_mode ? 8.0 * opt.ring_radius : *opt.target_length;
    max_steps = static_cast<std::size_t>(span / opt.step) + 16;
  }

  auto outside_ring = [&](Vec2 p) { return distance(p, opt.ring_center) > opt.ring_radius; };
  auto push = [&](const detail::RayState& s, double h) {
    ray.points.push_back(s.x);
    ray.tangents.push_back(detail::unit(s.kappa));
    ray.arc_lengths.push_back(ray.arc_lengths.back() + h);
    ray.last_step = h;
  };

  double s = 0.0;
  for (std::size_t n = 0; n < max_steps; ++n) {
    double h = n == 0 ? h0 : opt.step;
    bool final_step = false;
    if (!ring_mode) {
      const double remaining = *opt.target_length - s;
      if (remaining <= h * (1.0 + 1e-12)) {
        h = remaining;
        final_step = true;
      }
    }
    auto next = detail::heun_step(k_geometry, st, h);
    if (!next) {
      if (ring_mode) throw DomainError("trace_ray: ray left the field interior before reaching the ring");
      ray.truncated = true;
      return ray;
    }
    if (ring_mode && outside_ring(next->x)) {
      // Partial last step onto the circle: solve |x(h*) - c| = R for h* in (0, h].
      // From a start point on the circle the trivial root h = 0 is divided out.
      const bool from_circle = n == 0 && distance(st.x, opt.ring_center) >= opt.ring_radius * (1.0 - 1e-9);
      auto miss = [&](const detail::RayState& sn, double hh) {
        const double d = distance(sn.x, opt.ring_center);
        return from_circle ? (d - opt.ring_radius) * (d + opt.ring_radius) / hh : d - opt.ring_radius;
      };
      auto g = [&](double hh) -> std::optional<std::pair<double, detail::RayState>> {
        auto sn = detail::heun_step(k_geometry, st, hh);
        if (!sn) return std::nullopt;
        return std::pair{miss(*sn, hh), *sn};
      };
      double lo = 0.0;
      double glo = from_circle ? 2.0 * dot(st.x - opt.ring_center, detail::unit(st.kappa))
                               : distance(st.x, opt.ring_center) - opt.ring_radius;
      double hi = h, ghi = miss(*next, h);
      detail::RayState best = *next;
      double best_h = h;
      if (!(glo < 0.0)) glo = -1e-300;
      int side = 0;
      for (int it = 0; it < 100 && hi - lo > 1e-15 * opt.step; ++it) {
        double mid = (lo * ghi - hi * glo) / (ghi - glo);
        if (!(mid > lo && mid < hi)) mid = 0.5 * (lo + hi);
        auto gm = g(mid);
        if (!gm) throw DomainError("trace_ray: exit search left the field interior");
        best = gm->second;
        best_h = mid;
        if (std::abs(gm->first) <= 1e-14 * opt.ring_radius) break;
        if (gm->first > 0.0) {
          hi = mid;
          ghi = gm->first;
          if (side == 1) glo *= 0.5;
          side = 1;
        } else {
          lo = mid;
          glo = gm->first;
          if (side == -1) ghi *= 0.5;
          side = -1;
        }
      }
      // Project radially so the final point lies exactly on the circle.
      best.x = opt.ring_center + detail::unit(best.x - opt.ring_center) * opt.ring_radius;
      push(best, best_h);
      return ray;
    }
    st = *next;
    s += h;
    push(st, h);
    if (final_step) return ray;
  }
  throw NumericalError("trace_ray: step budget exhausted before termination");
}

/// Samples the unsmoothed wavenumber at every ray point.
inline void sample_wavenumber(Ray& ray, const Medium& medium, double omega) {
  ray.k_samples.resize(ray.points.size());
  for (std::size_t m = 0; m < ray.points.size(); ++m)
    ray.k_samples[m] = dispersion_wavenumber(medium, ray.points[m], omega).k;
}

/// Trapezoidal line integral of per-point samples along the ray's arc length.
inline std::vector<double> cumulative_trapezoid(const Ray& ray, const std::vector<double>& f) {
  std::vector<double> out(ray.size(), 0.0);
  for (std::size_t m = 1; m < ray.size(); ++m)
    out[m] = out[m - 1] + 0.5 * (ray.arc_lengths[m] - ray.arc_lengths[m - 1]) * (f[m - 1] + f[m]);
  return out;
}

/// Acoustic length: ∫ k ds along the ray.
inline double acoustic_length(const Ray& ray) {
  if (ray.size() < 2) throw ConfigError("acoustic_length: ray needs at least two points");
  if (ray.k_samples.size() != ray.size()) throw ConfigError("acoustic_length: ray has no wavenumber samples");
  return cumulative_trapezoid(ray, ray.k_samples).back();
}

/// Traces on a RayModel and fills k_samples from the unsmoothed medium.
inline Ray trace_ray(const RayModel& model, Vec2 x_start, double theta0, const TraceOptions& opt) {
  Ray r = trace_ray(model.geometry, x_start, theta0, opt);
  sample_wavenumber(r, model.medium, model.omega);
  return r;
}

}  // namespace ustray
