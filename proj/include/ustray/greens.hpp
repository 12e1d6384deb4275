#pragma once

// Ray-sampled Green's function: g = A_abs A_geom exp(i(phi + pi/4)).

#include <cmath>
#include <cstdint>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"
#include "ustray/ray.hpp"

namespace ustray {

/// Large-argument 2D homogeneous Green's function (8π k r)^(-1/2) exp(i(k r + π/4)).
inline cplx greens_homogeneous_2d(double omega, Vec2 x, Vec2 x_src, double c0) {
  const double r = distance(x, x_src);
  if (!(r > 0.0)) throw DomainError("greens_homogeneous_2d: coincident points");
  if (!(omega > 0.0) || !(c0 > 0.0)) throw ConfigError("greens_homogeneous_2d: omega and c0 must be positive");
  const double phi = omega / c0 * r;
  return std::polar(1.0 / std::sqrt(8.0 * pi * phi), phi + pi / 4.0);
}

struct RayGreens {
  double omega = 0.0;
  std::vector<double> phase;
  std::vector<double> amp_abs;
  std::vector<double> amp_geom;
  std::vector<double> jacobian;
  std::vector<int> caustic_count;
  std::vector<std::uint8_t> clamped;  // |J| hit the caustic floor
  bool truncated = false;             // Jacobian evaluated over a shortened index range

  std::size_t size() const { return phase.size(); }
  double amplitude(std::size_t m) const { return amp_abs[m] * amp_geom[m]; }
  cplx value(std::size_t m) const { return std::polar(amplitude(m), phase[m] + pi / 4.0); }
};

struct JacobianSamples {
  std::vector<double> J;
  bool truncated = false;
};

namespace detail {

/// ∂x/∂s by differences on the actual arc-length samples: central inside,
/// one-sided at the start, and spanning the last two segments at the end so a
/// very short final segment does not dominate.
inline Vec2 arc_derivative(const Ray& ray, std::size_t m) {
  const std::size_t M = ray.size() - 1;
  const auto& x = ray.points;
  const auto& s = ray.arc_lengths;
  if (M == 1) return (x[1] - x[0]) / (s[1] - s[0]);
  if (m == 0) return (x[1] - x[0]) / (s[1] - s[0]);
  if (m == M) return (x[M] - x[M - 2]) / (s[M] - s[M - 2]);
  return (x[m + 1] - x[m - 1]) / (s[m + 1] - s[m - 1]);
}

inline JacobianSamples jacobian_from_angle_derivative(const Ray& main, const std::vector<Vec2>& dx_dtheta,
                                                      std::size_t common, bool truncated) {
  JacobianSamples out;
  out.truncated = truncated;
  out.J.resize(main.size());
  for (std::size_t m = 0; m < main.size(); ++m) {
    if (m < common) {
      out.J[m] = cross(dx_dtheta[m], arc_derivative(main, m));
    } else {
      out.J[m] = out.J[common - 1];
    }
  }
  return out;
}

}  // namespace detail

/// J(s_m) = det[∂x/∂θ, ∂x/∂s] with ∂x/∂θ from two auxiliary rays at θ ± Δθ.
inline JacobianSamples ray_jacobian(const Ray& main, const Ray& aux_plus, const Ray& aux_minus, double delta_theta) {
  if (main.size() < 2) throw ConfigError("ray_jacobian: ray needs at least two points");
  if (!(delta_theta > 0.0)) throw ConfigError("ray_jacobian: delta_theta must be positive");
  const std::size_t common = std::min({main.size(), aux_plus.size(), aux_minus.size()});
  if (common < 2) throw NumericalError("ray_jacobian: auxiliary rays too short");
  std::vector<Vec2> dth(common);
  for (std::size_t m = 0; m < common; ++m)
    dth[m] = (aux_plus.points[m] - aux_minus.points[m]) / (2.0 * delta_theta);
  return detail::jacobian_from_angle_derivative(main, dth, common, common < main.size());
}

/// Variant using the neighbouring linked rays r±1 in place of auxiliary rays.
inline JacobianSamples ray_jacobian_adjacent(const Ray& main, const Ray& next, const Ray& prev) {
  if (main.size() < 2) throw ConfigError("ray_jacobian_adjacent: ray needs at least two points");
  double dtheta = next.theta0 - prev.theta0;
  if (!(std::abs(dtheta) > 0.0)) throw NumericalError("ray_jacobian_adjacent: neighbouring rays share an angle");
  const std::size_t common = std::min({main.size(), next.size(), prev.size()});
  // The last point of each linked ray is snapped to its receiver; stay on traced samples.
  const std::size_t usable = std::min(common, std::min(next.size(), prev.size()) - 1);
  if (usable < 2) throw NumericalError("ray_jacobian_adjacent: neighbouring rays too short");
  std::vector<Vec2> dth(usable);
  for (std::size_t m = 0; m < usable; ++m) dth[m] = (next.points[m] - prev.points[m]) / dtheta;
  return detail::jacobian_from_angle_derivative(main, dth, usable, usable < main.size());
}

/// Cumulative number of Jacobian sign changes from s_1 onward.
inline std::vector<int> caustic_counts(const std::vector<double>& J) {
  std::vector<int> K(J.size(), 0);
  int count = 0;
  int sign = 0;
  for (std::size_t m = 1; m < J.size(); ++m) {
    const int sg = J[m] > 0.0 ? 1 : (J[m] < 0.0 ? -1 : 0);
    if (sg != 0) {
      if (sign != 0 && sg != sign) ++count;
      sign = sg;
    }
    K[m] = count;
  }
  return K;
}

/// Trapezoidal ∫k ds plus π/2 per caustic.
inline std::vector<double> accumulate_phase(const Ray& ray, const Medium& medium, double omega,
                                            const std::vector<double>& J) {
  std::vector<double> k(ray.size());
  for (std::size_t m = 0; m < ray.size(); ++m) k[m] = dispersion_wavenumber(medium, ray.points[m], omega).k;
  std::vector<double> phi = cumulative_trapezoid(ray, k);
  if (!J.empty()) {
    if (J.size() != ray.size()) throw ConfigError("accumulate_phase: Jacobian length mismatch");
    const auto K = caustic_counts(J);
    for (std::size_t m = 0; m < phi.size(); ++m) phi[m] += 0.5 * pi * K[m];
  }
  return phi;
}

/// exp(-∫α ds), exactly 1 at the first point.
inline std::vector<double> accumulate_absorption(const Ray& ray, const Medium& medium, double omega) {
  std::vector<double> a(ray.size());
  for (std::size_t m = 0; m < ray.size(); ++m) a[m] = dispersion_wavenumber(medium, ray.points[m], omega).alpha;
  std::vector<double> out = cumulative_trapezoid(ray, a);
  for (double& v : out) v = std::exp(-v);
  out[0] = 1.0;
  return out;
}

/// Reference point for the spreading anchor: the first point at least half a
/// step from the source (s_1 for emitter rays; skips a very short first
/// segment on receiver-side rays).
inline std::size_t reference_index(const Ray& ray) {
  for (std::size_t m = 1; m < ray.size(); ++m)
    if (ray.arc_lengths[m] >= 0.5 * ray.step) return m;
  return ray.size() - 1;
}

struct GeometricAmplitude {
  std::vector<double> values;
  std::vector<std::uint8_t> clamped;
};

/// Green's-law spreading anchored to the homogeneous amplitude at the reference point.
inline GeometricAmplitude amp_geometric(const std::vector<double>& J, const Medium& medium, const Ray& ray,
                                        double omega, double floor_ratio = 1e-6) {
  if (J.size() != ray.size()) throw ConfigError("amp_geometric: Jacobian length mismatch");
  const std::size_t ref = reference_index(ray);
  const double J_ref = std::abs(J[ref]);
  if (!(J_ref > 0.0)) throw NumericalError("amp_geometric: zero Jacobian at the reference point");
  // Non-dispersive ω/c at the source, so the anchor is independent of absorption.
  const double k_src = omega / medium.sound_speed().eval(ray.points.front());
  const double anchor = 1.0 / std::sqrt(8.0 * pi * k_src * ray.arc_lengths[ref]);
  const double c_ref = medium.sound_speed().eval(ray.points[ref]);
  const double floor = floor_ratio * J_ref;
  GeometricAmplitude out;
  out.values.resize(J.size());
  out.clamped.assign(J.size(), 0);
  for (std::size_t m = 1; m < J.size(); ++m) {
    double aj = std::abs(J[m]);
    if (aj < floor) {
      aj = floor;
      out.clamped[m] = 1;
    }
    const double c = medium.sound_speed().eval(ray.points[m]);
    out.values[m] = anchor * std::sqrt((c / c_ref) * (J_ref / aj));
  }
  // The source point itself is singular; it carries the first sample's value.
  out.values[0] = out.values[1];
  return out;
}

/// All Green's quantities along one ray at one frequency, given its Jacobian.
inline RayGreens ray_greens(const Ray& ray, const JacobianSamples& jac, const Medium& medium, double omega) {
  RayGreens g;
  g.omega = omega;
  g.jacobian = jac.J;
  g.truncated = jac.truncated;
  g.caustic_count = caustic_counts(jac.J);
  g.phase = accumulate_phase(ray, medium, omega, jac.J);
  g.amp_abs = accumulate_absorption(ray, medium, omega);
  auto geom = amp_geometric(jac.J, medium, ray, omega);
  g.amp_geom = std::move(geom.values);
  g.clamped = std::move(geom.clamped);
  return g;
}

/// Green's value at the last point of a linked ray (the receiver).
inline cplx greens_at_end(const Ray& ray, const JacobianSamples& jac, const Medium& medium, double omega) {
  const auto g = ray_greens(ray, jac, medium, omega);
  return g.value(g.size() - 1);
}

/// Jacobians of all linked rays, emitter side.
inline std::vector<JacobianSamples> emitter_jacobians(const LinkedRaySet& linked) {
  std::vector<JacobianSamples> out(linked.size());
  parallel_for(linked.size(), [&](std::size_t i) {
    if (linked.valid[i])
      out[i] = ray_jacobian(linked.rays[i], linked.aux_plus[i], linked.aux_minus[i], linked.delta_theta);
  });
  return out;
}

/// Reversed rays (receiver to emitter) and their receiver-side Jacobians.
struct ReceiverRays {
  std::vector<Ray> rays;
  std::vector<JacobianSamples> jacobians;
};

inline ReceiverRays receiver_rays(const LinkedRaySet& linked) {
  if (!linked.has_receiver_aux()) throw ConfigError("receiver_rays: linked set lacks receiver-side auxiliary rays");
  ReceiverRays out;
  out.rays.resize(linked.size());
  out.jacobians.resize(linked.size());
  parallel_for(linked.size(), [&](std::size_t i) {
    if (!linked.valid[i]) return;
    out.rays[i] = reverse_ray(linked.rays[i]);
    out.jacobians[i] = ray_jacobian(out.rays[i], linked.rx_aux_plus[i], linked.rx_aux_minus[i], linked.delta_theta);
  });
  return out;
}

/// Green's samples along every reversed ray, anchored at the receivers.
inline std::vector<RayGreens> greens_from_receiver(const LinkedRaySet& linked, const Medium& medium, double omega) {
  const ReceiverRays rr = receiver_rays(linked);
  std::vector<RayGreens> out(linked.size());
  parallel_for(linked.size(), [&](std::size_t i) {
    if (linked.valid[i]) out[i] = ray_greens(rr.rays[i], rr.jacobians[i], medium, omega);
  });
  return out;
}

}  // namespace ustray
