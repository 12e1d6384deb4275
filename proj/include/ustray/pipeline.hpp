#pragma once

// Glue shared by the command line and the acceptance checks: starting
// absorption maps, phase sinograms from spectra, the inverse-crime guard and
// the shot simulation that feeds the TOF picker.

#include <cmath>
#include <string>
#include <vector>

#include "ustray/inversion.hpp"
#include "ustray/simulate.hpp"
#include "ustray/tof.hpp"

namespace ustray::pipeline {

/// Absorption map used for the waveform stage.
enum class AlphaModel { truth, homogeneous, zero };

inline AlphaModel parse_alpha(const std::string& s) {
  if (s == "true" || s == "truth") return AlphaModel::truth;
  if (s == "homogeneous") return AlphaModel::homogeneous;
  if (s == "zero") return AlphaModel::zero;
  throw ConfigError("alpha model must be true, homogeneous or zero, got '" + s + "'");
}

inline std::string to_string(AlphaModel a) {
  switch (a) {
    case AlphaModel::truth: return "true";
    case AlphaModel::homogeneous: return "homogeneous";
    case AlphaModel::zero: return "zero";
  }
  return "?";
}

/// True α0, its mean over the body ellipse (zero outside), or zero.
inline ScalarField starting_alpha(AlphaModel model, const Medium& truth, const EllipseInclusion& body) {
  const Grid2D& g = truth.grid();
  if (model == AlphaModel::truth) return truth.alpha0();
  std::vector<double> a(g.size(), 0.0);
  if (model == AlphaModel::homogeneous) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < g.size(); ++k)
      if (body.contains(g.node(k))) {
        sum += truth.alpha0().coefficients()[k];
        ++n;
      }
    if (n == 0) throw ConfigError("starting_alpha: body ellipse covers no grid node");
    for (std::size_t k = 0; k < g.size(); ++k)
      if (body.contains(g.node(k))) a[k] = sum / static_cast<double>(n);
  }
  return ScalarField(g, std::move(a));
}

/// (φ − φ0)/ω per (frequency, pair), index f * n_pairs + pair, from the
/// phase of p / p_water unwrapped along frequency starting at the lowest one.
/// Pairs absent in either set are NaN.
inline std::vector<double> phase_sinogram(const SpectraSet& p, const SpectraSet& water) {
  if (!p.same_shape(water)) throw ConfigError("phase_sinogram: spectra shapes differ");
  const std::size_t np = p.n_receivers * p.n_emitters, nf = p.n_frequencies();
  std::vector<double> out(nf * np, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < p.n_receivers; ++r)
    for (std::size_t e = 0; e < p.n_emitters; ++e) {
      const std::size_t q = p.pair(r, e);
      if (!p.is_present(r, e) || !water.is_present(r, e)) continue;
      double prev = 0.0;
      for (std::size_t f = 0; f < nf; ++f) {
        double ph = std::arg(p.at(f, r, e) * std::conj(water.at(f, r, e)));
        if (f > 0) ph += 2 * pi * std::round((prev - ph) / (2 * pi));
        prev = ph;
        out[f * np + q] = ph / p.frequencies[f];
      }
    }
  return out;
}

/// Settings compared by the inverse-crime guard.
struct Discretisation {
  Grid2D grid;
  double step = 0.0;  // ray step (m)
  int window = 1;     // geometry smoothing window (grid spacings)
};

/// Names of the settings that coincide between simulation and reconstruction.
inline std::vector<std::string> inverse_crime_matches(const Discretisation& sim, const Discretisation& rec) {
  std::vector<std::string> m;
  if (sim.grid == rec.grid) m.emplace_back("grid");
  if (sim.step == rec.step) m.emplace_back("step");
  if (sim.window == rec.window) m.emplace_back("window");
  return m;
}

/// Water and phantom shot traces and the first-arrival sinogram between them.
/// The phantom traces use seed + 1 so the two noise streams differ.
struct Shots {
  TimeSeriesSet water;
  TimeSeriesSet phantom;
};

inline Shots simulate_shots(const Medium& truth, const TransducerRing& ring, const SimConfig& sim, double c_min = 1400.0) {
  const TimeAxis axis = time_axis_for(ring, sim.pulse, c_min);
  SimConfig phantom_cfg = sim;
  phantom_cfg.seed = sim.seed + 1;
  return {simulate_time_series(Medium::homogeneous(truth.grid(), truth.c0(), truth.y()), ring, sim, axis),
          simulate_time_series(truth, ring, phantom_cfg, axis)};
}

inline TofSinogram shot_sinogram(const Shots& shots, const PickConfig& pick = {}, std::size_t decimate = 1) {
  const TimeSeriesSet w = decimate > 1 ? shots.water.decimated(decimate) : shots.water;
  const TimeSeriesSet p = decimate > 1 ? shots.phantom.decimated(decimate) : shots.phantom;
  return tof_discrepancy(pick_first_arrival(p, pick), pick_first_arrival(w, pick));
}

}  // namespace ustray::pipeline
