#pragma once

// Two-point ray linking: find the launch angle whose ray exits the ring at a
// given receiver. The scalar residual is the signed arc distance along the ring
// from the receiver to the exit point, measured counter-clockwise from the
// emitter so that it is monotone over the admissible launch fan.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/medium.hpp"
#include "ustray/parallel.hpp"
#include "ustray/ray.hpp"

namespace ustray {

enum class LinkMethod { secant, regula_falsi };

struct LinkConfig {
  double step = 0.0;          // Δs (m)
  double tolerance = 1e-9;    // |exit - receiver| (m)
  unsigned max_iter = 50;
  LinkMethod method = LinkMethod::secant;
  double angle_bracket = 20.0 * pi / 180.0;  // half-width around the straight-line angle
  double max_update = 5.0 * pi / 180.0;      // secant update clamp
  double delta_theta = 1e-4;                 // auxiliary ray offset (rad)
  bool receiver_aux = true;                  // also trace receiver-side auxiliary rays
  bool fallback = true;                      // retry with regula falsi when the secant fails

  void validate() const {
    if (!(step > 0.0)) throw ConfigError("LinkConfig: step must be positive");
    if (!(tolerance > 0.0)) throw ConfigError("LinkConfig: tolerance must be positive");
    if (max_iter < 1) throw ConfigError("LinkConfig: max_iter must be at least 1");
    if (!(delta_theta > 0.0)) throw ConfigError("LinkConfig: delta_theta must be positive");
    if (!(angle_bracket > 0.0 && angle_bracket < pi / 2)) throw ConfigError("LinkConfig: angle bracket out of range");
  }
};

class LinkFailure : public std::runtime_error {
 public:
  LinkFailure(const std::string& what, double angle, double miss)
      : std::runtime_error(what), best_angle(angle), miss_distance(miss) {}
  double best_angle;
  double miss_distance;
};

struct LinkResult {
  Ray ray;
  unsigned iterations = 0;  // number of launch-angle updates
  double miss = 0.0;        // exit-to-receiver distance before snapping
  bool used_fallback = false;
};

namespace detail {

inline TraceOptions ring_trace_options(const TransducerRing& ring, double step) {
  TraceOptions o;
  o.step = step;
  o.ring_center = ring.center;
  o.ring_radius = ring.radius;
  return o;
}

struct LinkProblem {
  const RayModel& model;
  const TransducerRing& ring;
  Vec2 xe, xr;
  const LinkConfig& cfg;
  double psi_e = 0.0, u_r = 0.0;
  double theta_normal = 0.0;  // inward normal at the emitter
  double lo_limit = 0.0, hi_limit = 0.0;

  LinkProblem(const RayModel& m, const TransducerRing& rg, Vec2 e, Vec2 r, const LinkConfig& c)
      : model(m), ring(rg), xe(e), xr(r), cfg(c) {
    psi_e = ring.polar_angle(xe);
    u_r = wrap_two_pi(ring.polar_angle(xr) - psi_e);
    theta_normal = angle_of(ring.center - xe);
    const double margin = 1e-6;
    lo_limit = theta_normal - pi / 2 + margin;
    hi_limit = theta_normal + pi / 2 - margin;
  }

  double straight_angle() const {
    double t = angle_of(xr - xe);
    // Express in the branch around the inward normal.
    while (t < theta_normal - pi) t += 2 * pi;
    while (t > theta_normal + pi) t -= 2 * pi;
    return t;
  }

  double clamp(double t) const { return std::min(std::max(t, lo_limit), hi_limit); }

  struct Eval {
    Ray ray;
    double residual;
  };

  Eval eval(double theta) const {
    Ray r = trace_ray(model.geometry, xe, theta, ring_trace_options(ring, cfg.step));
    const double u = wrap_two_pi(ring.polar_angle(r.end()) - psi_e);
    return {std::move(r), ring.radius * (u - u_r)};
  }
};

inline LinkResult finish(const LinkProblem& p, Ray ray, unsigned iters) {
  LinkResult out;
  out.miss = distance(ray.end(), p.xr);
  ray.points.back() = p.xr;
  sample_wavenumber(ray, p.model.medium, p.model.omega);
  out.ray = std::move(ray);
  out.iterations = iters;
  return out;
}

inline std::optional<LinkResult> link_secant(const LinkProblem& p, double theta0, double& best_theta,
                                             double& best_miss) {
  const auto& cfg = p.cfg;
  double t_prev = p.clamp(theta0);
  auto e_prev = p.eval(t_prev);
  best_theta = t_prev;
  best_miss = std::abs(e_prev.residual);
  if (distance(e_prev.ray.end(), p.xr) <= cfg.tolerance) return finish(p, std::move(e_prev.ray), 0);
  double slope = 2.0 * p.ring.radius;  // straight-ray derivative of the residual
  double t = t_prev;
  double f_prev = e_prev.residual;
  for (unsigned it = 1; it <= cfg.max_iter; ++it) {
    double delta = -f_prev / slope;
    delta = std::min(std::max(delta, -cfg.max_update), cfg.max_update);
    t = p.clamp(t_prev + delta);
    std::optional<LinkProblem::Eval> e;
    for (int shrink = 0; shrink < 30 && !e; ++shrink) {
      try {
        e = p.eval(t);
      } catch (const DomainError&) {
        t = 0.5 * (t + t_prev);
      }
    }
    if (!e) return std::nullopt;
    const double miss = distance(e->ray.end(), p.xr);
    if (std::abs(e->residual) < best_miss) {
      best_miss = std::abs(e->residual);
      best_theta = t;
    }
    if (miss <= cfg.tolerance) return finish(p, std::move(e->ray), it);
    const double s = (e->residual - f_prev) / (t - t_prev);
    slope = (std::isfinite(s) && s > 0.0) ? s : 2.0 * p.ring.radius;
    t_prev = t;
    f_prev = e->residual;
  }
  return std::nullopt;
}

inline std::optional<LinkResult> link_regula_falsi(const LinkProblem& p, double center, double& best_theta,
                                                   double& best_miss, unsigned& iters) {
  const auto& cfg = p.cfg;
  iters = 0;
  auto safe_eval = [&](double t) -> std::optional<LinkProblem::Eval> {
    try {
      return p.eval(t);
    } catch (const DomainError&) {
      return std::nullopt;
    }
  };
  auto note = [&](double t, double f) {
    if (std::abs(f) < best_miss) {
      best_miss = std::abs(f);
      best_theta = t;
    }
  };
  // Sweep progressively finer subdivisions of the bracket for a sign change,
  // widening to the whole admissible fan if needed.
  double a = 0, b = 0, fa = 0, fb = 0;
  bool found = false;
  for (int widen = 0; widen < 2 && !found; ++widen) {
    const double lo = widen == 0 ? p.clamp(center - cfg.angle_bracket) : p.lo_limit;
    const double hi = widen == 0 ? p.clamp(center + cfg.angle_bracket) : p.hi_limit;
    for (int level = 1; level <= 6 && !found; ++level) {
      const int n = 1 << level;
      std::optional<double> f_last;
      double t_last = lo;
      for (int i = 0; i <= n; ++i) {
        const double t = lo + (hi - lo) * i / n;
        auto e = safe_eval(t);
        if (!e) {
          f_last.reset();
          continue;
        }
        note(t, e->residual);
        if (distance(e->ray.end(), p.xr) <= cfg.tolerance) return finish(p, std::move(e->ray), iters);
        if (f_last && (*f_last < 0.0) != (e->residual < 0.0)) {
          a = t_last;
          fa = *f_last;
          b = t;
          fb = e->residual;
          found = true;
          break;
        }
        f_last = e->residual;
        t_last = t;
      }
    }
  }
  if (!found) return std::nullopt;
  int side = 0;
  for (unsigned it = 1; it <= cfg.max_iter; ++it) {
    iters = it;
    double t = (a * fb - b * fa) / (fb - fa);
    if (!(t > std::min(a, b) && t < std::max(a, b))) t = 0.5 * (a + b);
    auto e = safe_eval(t);
    if (!e) return std::nullopt;
    note(t, e->residual);
    if (distance(e->ray.end(), p.xr) <= cfg.tolerance) return finish(p, std::move(e->ray), it);
    if ((e->residual < 0.0) == (fa < 0.0)) {
      a = t;
      fa = e->residual;
      if (side == -1) fb *= 0.5;
      side = -1;
    } else {
      b = t;
      fb = e->residual;
      if (side == 1) fa *= 0.5;
      side = 1;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Links a ray from x_e to x_r on the ring. Throws LinkFailure.
inline LinkResult link_ray(const RayModel& model, const TransducerRing& ring, Vec2 x_e, Vec2 x_r,
                           const LinkConfig& cfg, std::optional<double> warm_angle = std::nullopt) {
  cfg.validate();
  if (distance(x_e, x_r) <= 1e-12 * ring.radius) throw ConfigError("link_ray: emitter and receiver coincide");
  detail::LinkProblem p(model, ring, x_e, x_r, cfg);
  const double straight = p.straight_angle();
  double best_theta = straight, best_miss = std::numeric_limits<double>::infinity();
  if (cfg.method == LinkMethod::secant) {
    double start = straight;
    if (warm_angle) {
      start = *warm_angle;
      while (start < p.theta_normal - pi) start += 2 * pi;
      while (start > p.theta_normal + pi) start -= 2 * pi;
    }
    if (auto r = detail::link_secant(p, start, best_theta, best_miss)) return std::move(*r);
    if (!cfg.fallback) {
      std::ostringstream os;
      os << "link_ray: secant did not converge in " << cfg.max_iter << " iterations (miss " << best_miss << " m)";
      throw LinkFailure(os.str(), best_theta, best_miss);
    }
    unsigned it = 0;
    if (auto r = detail::link_regula_falsi(p, straight, best_theta, best_miss, it)) {
      r->iterations += cfg.max_iter;
      r->used_fallback = true;
      return std::move(*r);
    }
  } else {
    unsigned it = 0;
    if (auto r = detail::link_regula_falsi(p, warm_angle.value_or(straight), best_theta, best_miss, it))
      return std::move(*r);
  }
  std::ostringstream os;
  os << "link_ray: no converged launch angle (best miss " << best_miss << " m)";
  throw LinkFailure(os.str(), best_theta, best_miss);
}

/// Ray with prescribed arc-length sampling, used for auxiliary rays.
inline Ray trace_auxiliary(const RayModel& model, Vec2 start, double theta, const Ray& reference,
                           std::optional<double> first_step = std::nullopt) {
  TraceOptions o;
  o.step = reference.step;
  o.first_step = first_step;
  o.target_length = reference.length();
  Ray r = trace_ray(model.geometry, start, theta, o);
  sample_wavenumber(r, model.medium, model.omega);
  return r;
}

/// Receiver-side view of a linked ray: points reversed, arc lengths from x_r.
inline Ray reverse_ray(const Ray& ray) {
  Ray out;
  out.step = ray.step;
  const std::size_t n = ray.size();
  out.points.assign(ray.points.rbegin(), ray.points.rend());
  out.tangents.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.tangents[i] = ray.tangents[n - 1 - i] * -1.0;
  if (!ray.k_samples.empty()) out.k_samples.assign(ray.k_samples.rbegin(), ray.k_samples.rend());
  out.arc_lengths.resize(n);
  const double total = ray.length();
  for (std::size_t i = 0; i < n; ++i) out.arc_lengths[i] = total - ray.arc_lengths[n - 1 - i];
  out.first_step = n > 1 ? out.arc_lengths[1] : 0.0;
  out.last_step = n > 1 ? out.arc_lengths[n - 1] - out.arc_lengths[n - 2] : 0.0;
  out.theta0 = angle_of(out.tangents.front());
  return out;
}

struct LinkedRaySet {
  std::size_t n_emitters = 0;
  std::size_t n_receivers = 0;
  double omega = 0.0;
  double delta_theta = 1e-4;
  std::vector<Ray> rays;  // index e * n_receivers + r
  std::vector<Ray> aux_plus, aux_minus;
  std::vector<Ray> rx_aux_plus, rx_aux_minus;  // receiver-side auxiliaries (may be empty)
  std::vector<double> angles;
  std::vector<double> link_residuals;
  std::vector<std::uint8_t> valid;
  std::vector<unsigned> iterations;
  std::size_t failures = 0;

  std::size_t index(std::size_t e, std::size_t r) const { return e * n_receivers + r; }
  std::size_t size() const { return rays.size(); }
  bool has_receiver_aux() const { return !rx_aux_plus.empty(); }
  unsigned long total_iterations() const {
    unsigned long s = 0;
    for (unsigned i : iterations) s += i;
    return s;
  }
};

/// Links all emitter/receiver pairs; pairs that fail are marked invalid. Throws
/// LinkFailure when more than 1% of pairs fail.
inline LinkedRaySet link_all(const RayModel& model, const TransducerRing& ring, const LinkConfig& cfg,
                             const LinkedRaySet* warm = nullptr) {
  cfg.validate();
  ring.validate();
  LinkedRaySet out;
  out.n_emitters = ring.n_emitters();
  out.n_receivers = ring.n_receivers();
  out.omega = model.omega;
  out.delta_theta = cfg.delta_theta;
  const std::size_t n = out.n_emitters * out.n_receivers;
  if (warm && (warm->n_emitters != out.n_emitters || warm->n_receivers != out.n_receivers))
    throw ConfigError("link_all: warm-start set does not match the ring");
  out.rays.resize(n);
  out.aux_plus.resize(n);
  out.aux_minus.resize(n);
  if (cfg.receiver_aux) {
    out.rx_aux_plus.resize(n);
    out.rx_aux_minus.resize(n);
  }
  out.angles.assign(n, 0.0);
  out.link_residuals.assign(n, std::numeric_limits<double>::infinity());
  out.valid.assign(n, 0);
  out.iterations.assign(n, 0);

  parallel_for(n, [&](std::size_t idx) {
    const std::size_t e = idx / out.n_receivers, r = idx % out.n_receivers;
    std::optional<double> warm_angle;
    if (warm && warm->valid[idx]) warm_angle = warm->angles[idx];
    try {
      LinkResult lr = link_ray(model, ring, ring.emitters[e], ring.receivers[r], cfg, warm_angle);
      const Ray& ray = lr.ray;
      out.aux_plus[idx] = trace_auxiliary(model, ray.points.front(), ray.theta0 + cfg.delta_theta, ray);
      out.aux_minus[idx] = trace_auxiliary(model, ray.points.front(), ray.theta0 - cfg.delta_theta, ray);
      if (cfg.receiver_aux) {
        const double back = angle_of(ray.tangents.back() * -1.0);
        out.rx_aux_plus[idx] = trace_auxiliary(model, ray.points.back(), back + cfg.delta_theta, ray, ray.last_step);
        out.rx_aux_minus[idx] =
            trace_auxiliary(model, ray.points.back(), back - cfg.delta_theta, ray, ray.last_step);
      }
      out.angles[idx] = ray.theta0;
      out.link_residuals[idx] = lr.miss;
      out.iterations[idx] = lr.iterations;
      out.rays[idx] = std::move(lr.ray);
      out.valid[idx] = 1;
    } catch (const LinkFailure& f) {
      out.angles[idx] = f.best_angle;
      out.link_residuals[idx] = f.miss_distance;
      out.iterations[idx] = cfg.max_iter;
    } catch (const DomainError&) {
      out.iterations[idx] = cfg.max_iter;
    }
  });
  for (auto v : out.valid) out.failures += v ? 0 : 1;
  if (static_cast<double>(out.failures) > 0.01 * static_cast<double>(n)) {
    std::ostringstream os;
    os << "link_all: " << out.failures << " of " << n << " pairs failed to link";
    throw LinkFailure(os.str(), 0.0, 0.0);
  }
  return out;
}

/// Straight segment from a to b sampled at the step, last segment shortened.
inline Ray straight_ray(Vec2 a, Vec2 b, double step) {
  if (!(step > 0.0)) throw ConfigError("straight_ray: step must be positive");
  const double L = distance(a, b);
  if (!(L > 0.0)) throw ConfigError("straight_ray: coincident end points");
  const Vec2 t = (b - a) / L;
  Ray r;
  r.step = step;
  r.theta0 = angle_of(t);
  const auto full = static_cast<std::size_t>(std::ceil(L / step * (1.0 - 1e-12)));
  for (std::size_t m = 0; m < full; ++m) {
    r.points.push_back(a + t * (step * static_cast<double>(m)));
    r.arc_lengths.push_back(step * static_cast<double>(m));
  }
  r.points.push_back(b);
  r.arc_lengths.push_back(L);
  r.tangents.assign(r.points.size(), t);
  r.first_step = r.arc_lengths[1];
  r.last_step = L - r.arc_lengths[r.arc_lengths.size() - 2];
  return r;
}

}  // namespace ustray
