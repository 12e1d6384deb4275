#pragma once

// Synthetic data: the ray model evaluated on a finer grid than any
// reconstruction, with an excitation spectrum, complex noise and optional
// time traces for the first-arrival picker.

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/forward.hpp"
#include "ustray/greens.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"
#include "ustray/parallel.hpp"
#include "ustray/tof.hpp"

namespace ustray {

/// Gaussian-windowed cosine burst centred at t = 0,
///   s(t) = A exp(-t²/(2σ_t²)) cos(ω_c t),  σ_t = 1/(2π σ_f),
/// with S(ω) = ∫ s(t) e^{iωt} dt in closed form.
struct TonePulse {
  double f_center = 0.85e6;  // Hz
  double sigma_f = 0.325e6;  // Hz; e^-2 of the peak at 0.2 and 1.5 MHz
  double amplitude = 1.0;

  double sigma_t() const { return 1.0 / (2.0 * pi * sigma_f); }

  double time(double t) const {
    const double st = sigma_t();
    return amplitude * std::exp(-t * t / (2 * st * st)) * std::cos(2 * pi * f_center * t);
  }

  cplx spectrum(double omega) const {
    const double st = sigma_t();
    const double wc = 2 * pi * f_center;
    const double a = std::exp(-0.5 * st * st * (omega - wc) * (omega - wc));
    const double b = std::exp(-0.5 * st * st * (omega + wc) * (omega + wc));
    return {amplitude * st * std::sqrt(2 * pi) * 0.5 * (a + b), 0.0};
  }

  SourceSpectrum source(const std::vector<double>& omegas) const {
    std::vector<cplx> a(omegas.size());
    for (std::size_t i = 0; i < omegas.size(); ++i) a[i] = spectrum(omegas[i]);
    return SourceSpectrum(omegas, std::move(a));
  }

  void validate() const {
    if (!(f_center > 0.0) || !(sigma_f > 0.0)) throw ConfigError("TonePulse: centre and bandwidth must be positive");
  }
};

/// Receiver-end Green's function of a fixed ray as a function of frequency.
/// With the geometry frozen, the phase is ω T + ω^y tan(πy/2) I_α, the
/// absorption exp(-ω^y I_α) and the spreading scales as ω^(-1/2).
struct PairResponse {
  cplx g_ref;
  double omega_ref = 0.0;
  double travel_time = 0.0;  // ∫ ds / c
  double alpha_integral = 0.0;  // ∫ α0 ds
  double y = 2.0;
  double tan_factor = 0.0;

  static PairResponse make(const Ray& ray, const JacobianSamples& jac, const Medium& m, double omega_ref) {
    PairResponse p;
    p.omega_ref = omega_ref;
    p.y = m.y();
    p.tan_factor = m.dispersion_factor();
    p.g_ref = greens_at_end(ray, jac, m, omega_ref);
    std::vector<double> slow(ray.size()), a0(ray.size());
    for (std::size_t i = 0; i < ray.size(); ++i) {
      slow[i] = 1.0 / m.sound_speed().eval(ray.points[i]);
      a0[i] = m.alpha0().eval(ray.points[i]);
    }
    p.travel_time = cumulative_trapezoid(ray, slow).back();
    p.alpha_integral = cumulative_trapezoid(ray, a0).back();
    return p;
  }

  cplx at(double omega) const {
    const double dwy = std::pow(omega, y) - std::pow(omega_ref, y);
    const double amp = std::sqrt(omega_ref / omega) * std::exp(-dwy * alpha_integral);
    const double dphi = (omega - omega_ref) * travel_time + dwy * tan_factor * alpha_integral;
    return g_ref * std::polar(amp, dphi);
  }
};

struct SimConfig {
  double step = 0.0;           // Δs; 0 picks the truth grid spacing
  int window = 15;             // geometry smoothing in truth-grid spacings; integrals use the unsmoothed truth
  std::size_t relink_every = 5;  // frequencies sharing one linked geometry
  double snr_db = 40.0;        // infinity switches noise off
  std::uint64_t seed = 1;
  double link_tolerance = 1e-9;
  TonePulse pulse;

  bool noise_enabled() const { return std::isfinite(snr_db); }

  void validate() const {
    if (!(snr_db > 0.0)) throw ConfigError("SimConfig: snr_db must be positive");
    if (relink_every < 1) throw ConfigError("SimConfig: relink_every must be at least 1");
    if (window < 1 || window % 2 == 0) throw ConfigError("SimConfig: window must be odd");
    pulse.validate();
  }

  LinkConfig link(const Grid2D& g) const {
    LinkConfig lc;
    lc.step = step > 0.0 ? step : g.spacing;
    lc.tolerance = link_tolerance;
    lc.receiver_aux = false;
    return lc;
  }
};

namespace detail {

inline LinkedRaySet link_for_simulation(const Medium& truth, const TransducerRing& ring, const SimConfig& sim,
                                        double omega, const LinkedRaySet* warm) {
  try {
    return link_all(RayModel::make(truth, omega, sim.window), ring, sim.link(truth.grid()), warm);
  } catch (const LinkFailure& f) {
    std::ostringstream os;
    os << "simulate: " << f.what() << " on the simulation grid at " << omega / (2 * pi) / 1e6
       << " MHz; aborting (more than 1% of pairs)";
    throw LinkFailure(os.str(), f.best_angle, f.miss_distance);
  }
}

inline std::vector<PairResponse> pair_responses(const Medium& truth, const LinkedRaySet& linked, double omega_ref) {
  std::vector<PairResponse> out(linked.size());
  parallel_for(linked.size(), [&](std::size_t i) {
    if (!linked.valid[i]) return;
    const JacobianSamples jac = ray_jacobian(linked.rays[i], linked.aux_plus[i], linked.aux_minus[i], linked.delta_theta);
    out[i] = PairResponse::make(linked.rays[i], jac, truth, omega_ref);
  });
  return out;
}

}  // namespace detail

/// Noise-free spectra on the simulation grid. Geometry is relinked once per
/// group of `relink_every` frequencies at the group's mean frequency.
inline SpectraSet simulate_clean(const Medium& truth, const TransducerRing& ring, const SourceSpectrum& source,
                                 const SimConfig& sim) {
  sim.validate();
  source.validate();
  SpectraSet out(source.frequencies, ring);
  std::optional<LinkedRaySet> linked;
  for (std::size_t b = 0; b < source.size(); b += sim.relink_every) {
    const std::size_t end = std::min(source.size(), b + sim.relink_every);
    double wm = 0.0;
    for (std::size_t f = b; f < end; ++f) wm += source.frequencies[f];
    wm /= static_cast<double>(end - b);
    linked = detail::link_for_simulation(truth, ring, sim, wm, linked ? &*linked : nullptr);
    const auto resp = detail::pair_responses(truth, *linked, wm);
    for (std::size_t e = 0; e < ring.n_emitters(); ++e)
      for (std::size_t r = 0; r < ring.n_receivers(); ++r) {
        const std::size_t i = linked->index(e, r);
        if (!linked->valid[i]) {
          out.present[out.pair(r, e)] = 0;
          continue;
        }
        for (std::size_t f = b; f < end; ++f)
          out.at(f, r, e) = resp[i].at(source.frequencies[f]) * source.amplitudes[f];
      }
  }
  return out;
}

/// Complex white noise per entry, σ = (peak |p| of that pair's spectrum)·10^(-SNR/20),
/// split evenly between real and imaginary parts.
inline void add_spectral_noise(SpectraSet& s, double snr_db, std::uint64_t seed) {
  if (!std::isfinite(snr_db)) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double scale = std::pow(10.0, -snr_db / 20.0) / std::sqrt(2.0);
  for (std::size_t r = 0; r < s.n_receivers; ++r)
    for (std::size_t e = 0; e < s.n_emitters; ++e) {
      double peak = 0.0;
      for (std::size_t f = 0; f < s.n_frequencies(); ++f) peak = std::max(peak, std::abs(s.at(f, r, e)));
      const double sd = peak * scale;
      for (std::size_t f = 0; f < s.n_frequencies(); ++f) {
        const double re = n01(rng), im = n01(rng);
        s.at(f, r, e) += cplx(sd * re, sd * im);
      }
    }
}

inline SpectraSet simulate_data(const Medium& truth, const TransducerRing& ring, const SourceSpectrum& source,
                                const SimConfig& sim) {
  SpectraSet s = simulate_clean(truth, ring, source, sim);
  if (sim.noise_enabled()) add_spectral_noise(s, sim.snr_db, sim.seed);
  return s;
}

struct TimeAxis {
  double dt = 1.8939e-8;  // 52.8 MHz
  std::size_t n_samples = 0;
  double t0 = 0.0;
};

/// Time axis covering the pulse before the earliest and after the latest
/// straight-path arrival at speed c_min.
inline TimeAxis time_axis_for(const TransducerRing& ring, const TonePulse& pulse, double c_min, double dt = 1.8939e-8) {
  TimeAxis ax;
  ax.dt = dt;
  ax.t0 = -6.0 * pulse.sigma_t();
  const double t_end = 2.0 * ring.radius / c_min + 6.0 * pulse.sigma_t();
  ax.n_samples = static_cast<std::size_t>(std::ceil((t_end - ax.t0) / dt)) + 1;
  return ax;
}

/// Time traces by direct quadrature of the inverse Fourier integral,
///   p(t) = (1/π) Re ∫ P(ω) e^{-iωt} dω,
/// in the variable u = sqrt(ω): the 2D far-field response grows as ω^(-1/2)
/// at low frequency, and 2u P(u²) is smooth. Midpoint rule in u up to the
/// pulse's 1e-6 level, spaced so the local ω step matches a period of four
/// trace lengths. One geometry linked at the pulse centre serves all
/// frequencies; white noise is added per trace at σ = peak·10^(-SNR/20).
inline TimeSeriesSet simulate_time_series(const Medium& truth, const TransducerRing& ring, const SimConfig& sim,
                                          const TimeAxis& axis) {
  sim.validate();
  if (!(axis.dt > 0.0) || axis.n_samples < 2) throw ConfigError("simulate_time_series: bad time axis");
  const TonePulse& pulse = sim.pulse;
  const double period = 4.0 * axis.dt * static_cast<double>(axis.n_samples);
  const double f_top = pulse.f_center + pulse.sigma_f * std::sqrt(2.0 * std::log(1e6));
  const double u_top = std::sqrt(2 * pi * f_top);
  const double du = (2 * pi / period) / (2.0 * u_top);
  const auto J = static_cast<std::size_t>(std::ceil(u_top / du));
  std::vector<double> omegas(J), weights(J);
  for (std::size_t j = 0; j < J; ++j) {
    const double u = du * (static_cast<double>(j) + 0.5);
    omegas[j] = u * u;
    weights[j] = 2.0 * u * du / pi;
  }

  const double wc = 2 * pi * pulse.f_center;
  const LinkedRaySet linked = detail::link_for_simulation(truth, ring, sim, wc, nullptr);
  const auto resp = detail::pair_responses(truth, linked, wc);

  TimeSeriesSet out(axis.n_samples, ring.n_receivers(), ring.n_emitters(), axis.dt, axis.t0);
  const std::size_t np = linked.size();
  std::vector<double> peaks(np, 0.0);
  parallel_for(np, [&](std::size_t i) {
    if (!linked.valid[i]) return;
    const std::size_t e = i / linked.n_receivers, r = i % linked.n_receivers;
    std::vector<double> tr(axis.n_samples, 0.0);
    for (std::size_t j = 0; j < J; ++j) {
      const double w = omegas[j];
      const cplx P = resp[i].at(w) * pulse.spectrum(w) * weights[j];
      // e^{-iω t_n} by rotation from t0.
      cplx ph = std::polar(1.0, -w * axis.t0);
      const cplx rot = std::polar(1.0, -w * axis.dt);
      for (std::size_t n = 0; n < axis.n_samples; ++n) {
        tr[n] += (P * ph).real();
        ph *= rot;
      }
    }
    double peak = 0.0;
    for (std::size_t n = 0; n < axis.n_samples; ++n) {
      out.at(n, r, e) = tr[n];
      peak = std::max(peak, std::abs(tr[n]));
    }
    peaks[i] = peak;
  });
  if (sim.noise_enabled()) {
    std::mt19937_64 rng(sim.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> n01(0.0, 1.0);
    const double scale = std::pow(10.0, -sim.snr_db / 20.0);
    for (std::size_t e = 0; e < ring.n_emitters(); ++e)
      for (std::size_t r = 0; r < ring.n_receivers(); ++r) {
        const double sd = peaks[linked.index(e, r)] * scale;
        for (std::size_t n = 0; n < axis.n_samples; ++n) out.at(n, r, e) += sd * n01(rng);
      }
  }
  return out;
}

/// Standard desk-scale configuration.
namespace desk {

inline constexpr double ring_radius = 0.027;
inline constexpr std::size_t n_emitters = 16;
inline constexpr std::size_t n_receivers = 64;
inline constexpr double c_water = 1500.0;
inline constexpr double y = 1.4;

inline Grid2D reconstruction_grid() { return Grid2D::centered({0, 0}, 1e-3, 64); }
inline Grid2D simulation_grid() { return Grid2D::centered({0, 0}, 5e-4, 128); }
inline TransducerRing ring() { return TransducerRing::uniform({0, 0}, ring_radius, n_emitters, n_receivers); }

/// Breast-like ellipse phantom in the 1470–1580 m/s band.
inline std::vector<EllipseInclusion> ellipse_phantom() {
  return {
      {{0.0, 0.0}, 0.017, 0.013, 0.3, 1470.0, 0.4},      // fatty body
      {{0.002, 0.001}, 0.009, 0.006, -0.4, 1540.0, 0.7},  // glandular region
      {{-0.005, 0.004}, 0.003, 0.003, 0.0, 1580.0, 1.0},  // dense lesion
      {{0.006, -0.005}, 0.0025, 0.0025, 0.0, 1520.0, 0.1},  // cyst-like
  };
}

/// Single disc used by smaller checks.
inline std::vector<EllipseInclusion> disc_phantom(double speed = 1575.0, double radius = 0.008) {
  return {{{0.002, -0.001}, radius, radius, 0.0, speed, 0.5}};
}

}  // namespace desk

}  // namespace ustray
