#pragma once

// First-arrival picking and bent-ray time-of-flight inversion for the initial
// sound-speed map. The unknown is slowness: travel time is linear in the
// slowness control points along fixed rays, t = A s, with A built from the
// trapezoid weights along each ray times the B-spline stencil weights.

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/gridding.hpp"
#include "ustray/inversion.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"
#include "ustray/parallel.hpp"

namespace ustray {

/// Real traces, index (t, r, e) with e fastest.
struct TimeSeriesSet {
  std::size_t n_samples = 0;
  std::size_t n_receivers = 0;
  std::size_t n_emitters = 0;
  double dt = 0.0;
  double t0 = 0.0;
  std::vector<double> samples;

  TimeSeriesSet() = default;
  TimeSeriesSet(std::size_t nt, std::size_t nr, std::size_t ne, double dt_, double t0_)
      : n_samples(nt), n_receivers(nr), n_emitters(ne), dt(dt_), t0(t0_), samples(nt * nr * ne, 0.0) {}

  std::size_t index(std::size_t t, std::size_t r, std::size_t e) const { return (t * n_receivers + r) * n_emitters + e; }
  double& at(std::size_t t, std::size_t r, std::size_t e) { return samples[index(t, r, e)]; }
  double at(std::size_t t, std::size_t r, std::size_t e) const { return samples[index(t, r, e)]; }
  double time(std::size_t t) const { return t0 + dt * static_cast<double>(t); }

  std::vector<double> trace(std::size_t r, std::size_t e) const {
    std::vector<double> out(n_samples);
    for (std::size_t t = 0; t < n_samples; ++t) out[t] = at(t, r, e);
    return out;
  }

  void validate() const {
    if (!(dt > 0.0)) throw ConfigError("TimeSeriesSet: dt must be positive");
    if (samples.size() != n_samples * n_receivers * n_emitters) throw ConfigError("TimeSeriesSet: sample count mismatch");
    for (double v : samples)
      if (!std::isfinite(v)) throw ConfigError("TimeSeriesSet: samples must be finite");
  }

  /// Keeps every `factor`-th sample.
  TimeSeriesSet decimated(std::size_t factor) const {
    if (factor < 1) throw ConfigError("decimate: factor must be at least 1");
    TimeSeriesSet out((n_samples + factor - 1) / factor, n_receivers, n_emitters, dt * static_cast<double>(factor), t0);
    for (std::size_t t = 0; t < out.n_samples; ++t)
      for (std::size_t r = 0; r < n_receivers; ++r)
        for (std::size_t e = 0; e < n_emitters; ++e) out.at(t, r, e) = at(t * factor, r, e);
    return out;
  }
};

struct PickConfig {
  std::size_t energy_window = 32;  // samples on each side of the energy-ratio split
  std::size_t aic_half_window = 32;
  double min_peak_to_noise = 12.0;  // below this the trace is treated as noise
  std::size_t smoothing = 5;        // zero-phase moving average before picking; 1 disables
  double floor_fraction = 1e-3;     // energy floor as a fraction of peak², sets the onset level
};

/// Arrival times per (r, e), index r * n_emitters + e.
struct ArrivalPicks {
  std::size_t n_receivers = 0;
  std::size_t n_emitters = 0;
  std::vector<double> time;
  std::vector<std::uint8_t> valid;

  std::size_t pair(std::size_t r, std::size_t e) const { return r * n_emitters + e; }
};

/// Sample index of the first arrival, or nothing when the trace is noise.
///
/// A two-window energy ratio locates the onset region before the trace peak,
/// then the Akaike criterion on the surrounding window places the split
/// between the noise-like and signal-like parts.
inline std::optional<double> pick_trace(std::span<const double> raw, const PickConfig& cfg = {}) {
  const std::size_t n = raw.size();
  const std::size_t L = cfg.energy_window;
  if (L < 2 || n < 2 * L + 2) throw ConfigError("pick_trace: trace shorter than the energy windows");
  if (cfg.smoothing < 1 || cfg.smoothing % 2 == 0) throw ConfigError("pick_trace: smoothing must be odd");
  // Band-limit first: the pulse occupies a small part of the sampled band.
  std::vector<double> x(raw.begin(), raw.end());
  if (cfg.smoothing > 1) {
    const long h = static_cast<long>(cfg.smoothing / 2);
    std::vector<double> cum(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) cum[i + 1] = cum[i] + raw[i];
    for (long i = 0; i < static_cast<long>(n); ++i) {
      const long lo = std::max(0L, i - h), hi = std::min(static_cast<long>(n) - 1, i + h);
      x[static_cast<std::size_t>(i)] = (cum[static_cast<std::size_t>(hi + 1)] - cum[static_cast<std::size_t>(lo)]) /
                                       static_cast<double>(hi - lo + 1);
    }
  }
  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(x[i]);
  const auto peak_it = std::max_element(mag.begin(), mag.end());
  const double peak = *peak_it;
  if (!(peak > 0.0)) return std::nullopt;
  // Robust white-noise level from first differences of the raw trace, mapped
  // through the moving average. Differences ignore the slow tail that follows
  // a 2D arrival, which would otherwise dominate a median of |x|.
  std::vector<double> diff(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) diff[i] = std::abs(raw[i + 1] - raw[i]);
  std::nth_element(diff.begin(), diff.begin() + static_cast<long>(diff.size() / 2), diff.end());
  const double sigma = 1.4826 * diff[diff.size() / 2] / std::sqrt(2.0 * static_cast<double>(cfg.smoothing));
  if (peak < cfg.min_peak_to_noise * sigma) return std::nullopt;

  // A floor tied to the trace's own peak keeps the pick at one envelope level
  // whatever the noise, as long as the noise stays below it.
  const double floor2 = std::max(sigma * sigma, cfg.floor_fraction * peak * peak);
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) cum[i + 1] = cum[i] + x[i] * x[i];
  const auto i_peak = static_cast<std::size_t>(peak_it - mag.begin());
  const std::size_t hi = std::min(i_peak, n - L);
  if (hi <= L) return static_cast<double>(i_peak);
  std::size_t i_er = L;
  double best = -1.0;
  for (std::size_t i = L; i <= hi; ++i) {
    const double pre = cum[i] - cum[i - L];
    const double post = cum[i + L] - cum[i];
    const double er = post / (pre + static_cast<double>(L) * floor2);
    if (er > best) {
      best = er;
      i_er = i;
    }
  }

  const std::size_t a = i_er > cfg.aic_half_window ? i_er - cfg.aic_half_window : 0;
  const std::size_t b = std::min(n - 1, i_er + cfg.aic_half_window);
  const std::size_t m = b - a + 1;
  if (m < 4) return static_cast<double>(i_er);
  // Akaike split of [a, b], minimised over k in [k_lo, k_hi].
  auto aic_split = [&](std::span<const double> z, std::size_t k_lo, std::size_t k_hi) {
    std::vector<double> s1(m + 1, 0.0), s2(m + 1, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      s1[i + 1] = s1[i] + z[a + i];
      s2[i + 1] = s2[i] + z[a + i] * z[a + i];
    }
    auto var = [&](std::size_t lo, std::size_t hi_excl) {
      const double cnt = static_cast<double>(hi_excl - lo);
      const double mean = (s1[hi_excl] - s1[lo]) / cnt;
      return std::max((s2[hi_excl] - s2[lo]) / cnt - mean * mean, 0.0) + floor2;
    };
    std::size_t k_best = k_lo;
    double aic_best = std::numeric_limits<double>::infinity();
    for (std::size_t k = k_lo; k <= k_hi; ++k) {
      const double aic = static_cast<double>(k) * std::log(var(0, k)) + static_cast<double>(m - k) * std::log(var(k, m));
      if (aic < aic_best) {
        aic_best = aic;
        k_best = k;
      }
    }
    return k_best;
  };
  const std::size_t k = aic_split(x, 1, m - 2);
  return static_cast<double>(a + k);
}

inline ArrivalPicks pick_first_arrival(const TimeSeriesSet& series, const PickConfig& cfg = {}) {
  series.validate();
  ArrivalPicks out;
  out.n_receivers = series.n_receivers;
  out.n_emitters = series.n_emitters;
  const std::size_t np = series.n_receivers * series.n_emitters;
  out.time.assign(np, std::numeric_limits<double>::quiet_NaN());
  out.valid.assign(np, 0);
  parallel_for(np, [&](std::size_t p) {
    const std::size_t r = p / series.n_emitters, e = p % series.n_emitters;
    const std::vector<double> tr = series.trace(r, e);
    if (const auto k = pick_trace(tr, cfg)) {
      out.time[p] = series.t0 + *k * series.dt;
      out.valid[p] = 1;
    }
  });
  return out;
}

/// First-arrival discrepancies Δt (r, e) of a phantom shot set against water.
struct TofSinogram {
  std::size_t n_receivers = 0;
  std::size_t n_emitters = 0;
  std::vector<double> tof;
  std::vector<std::uint8_t> mask;

  TofSinogram() = default;
  TofSinogram(std::size_t nr, std::size_t ne) : n_receivers(nr), n_emitters(ne), tof(nr * ne, 0.0), mask(nr * ne, 1) {}

  std::size_t pair(std::size_t r, std::size_t e) const { return r * n_emitters + e; }
  double masked_fraction() const {
    std::size_t off = 0;
    for (auto m : mask) off += m ? 0 : 1;
    return mask.empty() ? 0.0 : static_cast<double>(off) / static_cast<double>(mask.size());
  }
};

inline TofSinogram tof_discrepancy(const ArrivalPicks& phantom, const ArrivalPicks& water) {
  if (phantom.n_receivers != water.n_receivers || phantom.n_emitters != water.n_emitters)
    throw ConfigError("tof_discrepancy: pick sets have different shapes");
  TofSinogram s(phantom.n_receivers, phantom.n_emitters);
  for (std::size_t p = 0; p < s.tof.size(); ++p) {
    s.mask[p] = phantom.valid[p] && water.valid[p];
    s.tof[p] = s.mask[p] ? phantom.time[p] - water.time[p] : 0.0;
  }
  return s;
}

using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Path-length system over all grid nodes: row i integrates a slowness spline
/// along ray i with the trapezoid rule (short last segment weighted exactly).
inline SparseRows path_length_system(const Grid2D& grid, const std::vector<const Ray*>& rays) {
  const ScalarField probe = ScalarField::constant(grid, 0.0);
  std::vector<std::vector<Eigen::Triplet<double>>> rows(rays.size());
  parallel_for(rays.size(), [&](std::size_t i) {
    const Ray& ray = *rays[i];
    auto& trip = rows[i];
    const std::size_t M = ray.size();
    for (std::size_t m = 0; m < M; ++m) {
      double w = 0.0;
      if (m > 0) w += 0.5 * (ray.arc_lengths[m] - ray.arc_lengths[m - 1]);
      if (m + 1 < M) w += 0.5 * (ray.arc_lengths[m + 1] - ray.arc_lengths[m]);
      const SplineStencil st = probe.stencil(ray.points[m]);
      for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b)
          trip.emplace_back(static_cast<int>(i), static_cast<int>(grid.index(st.i0 + a, st.j0 + b)),
                            w * st.wu[a] * st.wv[b]);
    }
  });
  std::vector<Eigen::Triplet<double>> all;
  for (auto& r : rows) all.insert(all.end(), r.begin(), r.end());
  SparseRows A(static_cast<Eigen::Index>(rays.size()), static_cast<Eigen::Index>(grid.size()));
  A.setFromTriplets(all.begin(), all.end());
  return A;
}

/// Least-squares CG on min |A x - b|, started from zero.
inline Eigen::VectorXd cgls(const SparseRows& A, const Eigen::VectorXd& b, unsigned iterations) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(A.cols());
  Eigen::VectorXd r = b;
  Eigen::VectorXd s = A.transpose() * r;
  Eigen::VectorXd p = s;
  double gamma = s.squaredNorm();
  const double stop = std::max(std::numeric_limits<double>::min(), 1e-30 * gamma);
  for (unsigned it = 0; it < iterations && gamma > stop; ++it) {
    const Eigen::VectorXd q = A * p;
    const double qq = q.squaredNorm();
    if (!(qq > 0.0)) break;
    const double alpha = gamma / qq;
    x += alpha * p;
    r -= alpha * q;
    s = A.transpose() * r;
    const double gamma_next = s.squaredNorm();
    p = s + (gamma_next / gamma) * p;
    gamma = gamma_next;
  }
  return x;
}

/// "straight:1,bent:6" style iteration schedule.
struct TofSchedule {
  unsigned straight = 1;
  unsigned bent = 3;

  static TofSchedule parse(const std::string& text) {
    TofSchedule s{0, 0};
    std::istringstream is(text);
    std::string item;
    bool any = false;
    while (std::getline(is, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("tof schedule: expected kind:count, got '" + item + "'");
      const std::string kind = item.substr(0, colon);
      unsigned long count = 0;
      try {
        std::size_t used = 0;
        count = std::stoul(item.substr(colon + 1), &used);
        if (used != item.size() - colon - 1) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("tof schedule: bad count in '" + item + "'");
      }
      if (kind == "straight")
        s.straight = static_cast<unsigned>(count);
      else if (kind == "bent")
        s.bent = static_cast<unsigned>(count);
      else
        throw ConfigError("tof schedule: unknown ray kind '" + kind + "'");
      any = true;
    }
    if (!any) throw ConfigError("tof schedule: empty");
    return s;
  }

  std::string str() const { return "straight:" + std::to_string(straight) + ",bent:" + std::to_string(bent); }
};

struct TofConfig {
  TofSchedule schedule;
  unsigned cg_iterations = 20;
  int window = 7;       // averaging window applied to each slowness update
  LinkConfig link;      // link.step defaults to the grid spacing
  double omega = 2 * pi * 1e6;  // any value: tracing is dispersion-free here
  double c_min = Medium::min_speed;
  double c_max = Medium::max_speed;
  std::optional<Medium> truth;
  std::vector<std::size_t> metric_nodes;
  std::function<void(const std::string&)> log;
};

struct TofIteration {
  std::size_t index = 0;
  bool bent = false;
  double misfit_before = 0.0;  // rms travel-time residual (s)
  double misfit_after = 0.0;
  bool accepted = false;
  double relative_error = std::numeric_limits<double>::quiet_NaN();
  unsigned long link_iterations = 0;
  std::size_t rows = 0;
};

struct TofResult {
  Medium model;
  std::vector<TofIteration> history;
  std::optional<LinkedRaySet> linked;  // bent rays on the returned model, for warm starts
};

namespace detail {

inline Medium lossless(const Medium& m) {
  return Medium(m.sound_speed(), m.c0(), ScalarField::constant(m.grid(), 0.0), 2.0);
}

struct TofSystem {
  SparseRows A;
  std::vector<std::size_t> pairs;  // sinogram pair per row
};

inline TofSystem tof_system(const Grid2D& grid, const TransducerRing& ring, const TofSinogram& sino,
                            const LinkedRaySet* bent, double step) {
  std::vector<Ray> straight;
  std::vector<const Ray*> rays;
  TofSystem sys;
  if (!bent) straight.reserve(sino.tof.size());
  for (std::size_t r = 0; r < sino.n_receivers; ++r)
    for (std::size_t e = 0; e < sino.n_emitters; ++e) {
      const std::size_t p = sino.pair(r, e);
      if (!sino.mask[p]) continue;
      if (bent) {
        const std::size_t i = bent->index(e, r);
        if (!bent->valid[i]) continue;
        rays.push_back(&bent->rays[i]);
      } else {
        straight.push_back(straight_ray(ring.emitters[e], ring.receivers[r], step));
      }
      sys.pairs.push_back(p);
    }
  if (!bent)
    for (const auto& s : straight) rays.push_back(&s);
  sys.A = path_length_system(grid, rays);
  return sys;
}

inline Eigen::VectorXd slowness(const Medium& m) {
  auto c = m.sound_speed().coefficients();
  Eigen::VectorXd s(static_cast<Eigen::Index>(c.size()));
  for (std::size_t i = 0; i < c.size(); ++i) s(static_cast<Eigen::Index>(i)) = 1.0 / c[i];
  return s;
}

/// Δt_obs − (A s − water travel time) per row.
inline Eigen::VectorXd tof_residual(const TofSystem& sys, const TofSinogram& sino, const TransducerRing& ring,
                                    const Medium& m) {
  const Eigen::VectorXd t = sys.A * slowness(m);
  Eigen::VectorXd res(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const std::size_t p = sys.pairs[static_cast<std::size_t>(i)];
    const std::size_t r = p / sino.n_emitters, e = p % sino.n_emitters;
    const double t_water = distance(ring.emitters[e], ring.receivers[r]) / m.c0();
    res(i) = sino.tof[p] - (t(i) - t_water);
  }
  return res;
}

inline double rms(const Eigen::VectorXd& v) {
  return v.size() ? std::sqrt(v.squaredNorm() / static_cast<double>(v.size())) : 0.0;
}

}  // namespace detail

/// Modelled travel-time discrepancies of `m` against water along straight or
/// linked rays.
inline TofSinogram model_tof(const Medium& m, const TransducerRing& ring, const LinkedRaySet* bent, double step) {
  TofSinogram zero(ring.n_receivers(), ring.n_emitters());
  const detail::TofSystem sys = detail::tof_system(m.grid(), ring, zero, bent, step);
  const Eigen::VectorXd res = detail::tof_residual(sys, zero, ring, m);
  TofSinogram out(ring.n_receivers(), ring.n_emitters());
  std::fill(out.mask.begin(), out.mask.end(), 0);
  for (std::size_t i = 0; i < sys.pairs.size(); ++i) {
    out.tof[sys.pairs[i]] = -res(static_cast<Eigen::Index>(i));
    out.mask[sys.pairs[i]] = 1;
  }
  return out;
}

/// Iterative slowness inversion starting from `init` (normally water). Each
/// iteration builds the path-length system on the current rays, solves for the
/// update by CGLS, smooths it and updates the model. An iterate that raises the
/// misfit is rejected and the best model so far is returned.
inline TofResult tof_invert(const TofSinogram& sino, const TransducerRing& ring, const Medium& init,
                            const TofConfig& cfg) {
  ring.validate();
  if (sino.n_receivers != ring.n_receivers() || sino.n_emitters != ring.n_emitters())
    throw ConfigError("tof_invert: sinogram does not match the ring");
  if (sino.masked_fraction() >= 0.2) throw ConfigError("tof_invert: 20% or more of the sinogram is masked");
  const Grid2D& grid = init.grid();
  LinkConfig lc = cfg.link;
  if (!(lc.step > 0.0)) lc.step = grid.spacing;
  lc.receiver_aux = false;
  const NodeMask mask = NodeMask::inside_ring(grid, ring);

  TofResult out;
  out.model = init;
  auto relink = [&](const Medium& m, const LinkedRaySet* warm) {
    return link_all(RayModel::make(detail::lossless(m), cfg.omega, 1), ring, lc, warm);
  };
  auto metrics = [&](TofIteration& it) {
    if (cfg.truth)
      it.relative_error = relative_error(out.model, *cfg.truth, cfg.metric_nodes.empty() ? mask.nodes : cfg.metric_nodes);
  };

  const unsigned total = cfg.schedule.straight + cfg.schedule.bent;
  std::optional<LinkedRaySet> current;  // bent rays on out.model
  for (unsigned n = 0; n < total; ++n) {
    TofIteration it;
    it.index = n;
    it.bent = n >= cfg.schedule.straight;
    if (it.bent && !current) current = relink(out.model, nullptr);
    const detail::TofSystem sys = detail::tof_system(grid, ring, sino, it.bent ? &*current : nullptr, lc.step);
    it.rows = sys.pairs.size();
    const Eigen::VectorXd res = detail::tof_residual(sys, sino, ring, out.model);
    it.misfit_before = detail::rms(res);

    // Solve on the mask columns only.
    std::vector<int> col_of(grid.size(), -1);
    for (std::size_t q = 0; q < mask.size(); ++q) col_of[mask.nodes[q]] = static_cast<int>(q);
    SparseRows Am(sys.A.rows(), static_cast<Eigen::Index>(mask.size()));
    {
      std::vector<Eigen::Triplet<double>> trip;
      for (Eigen::Index i = 0; i < sys.A.outerSize(); ++i)
        for (SparseRows::InnerIterator itA(sys.A, i); itA; ++itA)
          if (col_of[static_cast<std::size_t>(itA.col())] >= 0)
            trip.emplace_back(static_cast<int>(i), col_of[static_cast<std::size_t>(itA.col())], itA.value());
      Am.setFromTriplets(trip.begin(), trip.end());
    }
    const Eigen::VectorXd ds = cgls(Am, res, cfg.cg_iterations);
    std::vector<double> full(grid.size(), 0.0);
    for (std::size_t q = 0; q < mask.size(); ++q) full[mask.nodes[q]] = ds(static_cast<Eigen::Index>(q));
    const ScalarField smooth = smooth_field(ScalarField(grid, std::move(full)), cfg.window);

    std::vector<double> c(out.model.sound_speed().coefficients().begin(), out.model.sound_speed().coefficients().end());
    for (std::size_t k : mask.nodes) {
      const double s = 1.0 / c[k] + smooth.coefficients()[k];
      c[k] = s > 0.0 ? std::clamp(1.0 / s, cfg.c_min, cfg.c_max) : cfg.c_max;
    }
    const Medium next = out.model.with_sound_speed(ScalarField(grid, std::move(c)));
    LinkedRaySet next_linked = relink(next, current ? &*current : nullptr);
    it.link_iterations = next_linked.total_iterations();
    const detail::TofSystem check = detail::tof_system(grid, ring, sino, &next_linked, lc.step);
    it.misfit_after = detail::rms(detail::tof_residual(check, sino, ring, next));
    it.accepted = it.misfit_after < it.misfit_before;
    if (it.accepted) {
      out.model = next;
      current = std::move(next_linked);
    }
    metrics(it);
    if (cfg.log) {
      std::ostringstream os;
      os << "tof " << n << (it.bent ? " bent" : " straight") << "  misfit " << it.misfit_before << " -> "
         << it.misfit_after << (it.accepted ? "" : " (rejected)");
      if (std::isfinite(it.relative_error)) os << "  RE " << it.relative_error << "%";
      cfg.log(os.str());
    }
    out.history.push_back(it);
    if (!it.accepted) break;
  }
  out.linked = std::move(current);
  return out;
}

}  // namespace ustray
