#pragma once

// Frequency-staged Gauss-Newton inversion on sound speed.
//
// For each frequency batch the Fréchet operator maps a perturbation dc on the
// mask nodes to receiver spectra,
//   δP_ω = Δx² s_ω G_r,ω diag(Υ_ω ⊙ dc) G_e,ωᵀ,
// with G_e (n_e × nodes) and G_r (n_r × nodes) the gridded Green's functions.
// The gradient and Gauss-Newton Hessian are its adjoint applied to the residual
// and to δP respectively.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/forward.hpp"
#include "ustray/gridding.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"

namespace ustray {

struct FrequencySchedule {
  std::vector<double> frequencies;  // rad/s, strictly increasing
  std::size_t batch_size = 4;
  bool descending = false;          // run batches from high to low frequency

  FrequencySchedule() = default;
  FrequencySchedule(std::vector<double> f, std::size_t batch) : frequencies(std::move(f)), batch_size(batch) {
    validate();
  }

  /// n equidistant frequencies between f_min and f_max given in Hz.
  static FrequencySchedule linspace_hz(double f_min, double f_max, std::size_t n, std::size_t batch) {
    if (n < 1 || !(f_min > 0.0) || !(f_max >= f_min)) throw ConfigError("FrequencySchedule: bad frequency range");
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double f = n == 1 ? f_min : f_min + (f_max - f_min) * static_cast<double>(i) / static_cast<double>(n - 1);
      w[i] = 2.0 * pi * f;
    }
    return FrequencySchedule(std::move(w), batch);
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("FrequencySchedule: batch size must be at least 1");
    if (frequencies.empty()) throw ConfigError("FrequencySchedule: no frequencies");
    for (std::size_t i = 0; i < frequencies.size(); ++i) {
      if (!(frequencies[i] > 0.0)) throw ConfigError("FrequencySchedule: frequencies must be positive");
      if (i > 0 && !(frequencies[i] > frequencies[i - 1]))
        throw ConfigError("FrequencySchedule: frequencies must be strictly increasing");
    }
  }

  std::size_t n_batches() const { return (frequencies.size() + batch_size - 1) / batch_size; }

  /// Frequency index range [first, second) of the n-th batch in run order.
  std::pair<std::size_t, std::size_t> batch(std::size_t n) const {
    const std::size_t b = descending ? n_batches() - 1 - n : n;
    return {b * batch_size, std::min(frequencies.size(), (b + 1) * batch_size)};
  }
};

/// Complex difference modelled − measured; absent in either set is absent in the result.
inline SpectraSet residual(const SpectraSet& modelled, const SpectraSet& measured) {
  if (!modelled.same_shape(measured)) throw ConfigError("residual: spectra sets have different shapes");
  SpectraSet out = modelled;
  for (std::size_t p = 0; p < out.present.size(); ++p) out.present[p] = modelled.present[p] && measured.present[p];
  for (std::size_t f = 0; f < out.n_frequencies(); ++f)
    for (std::size_t r = 0; r < out.n_receivers; ++r)
      for (std::size_t e = 0; e < out.n_emitters; ++e)
        out.at(f, r, e) = out.is_present(r, e) ? modelled.at(f, r, e) - measured.at(f, r, e) : cplx(0.0, 0.0);
  return out;
}

/// ½ Σ |δp|² over all frequencies of the set and all present pairs.
inline double objective(const SpectraSet& res) {
  double acc = 0.0;
  for (std::size_t f = 0; f < res.n_frequencies(); ++f)
    for (std::size_t r = 0; r < res.n_receivers; ++r)
      for (std::size_t e = 0; e < res.n_emitters; ++e)
        if (res.is_present(r, e)) acc += std::norm(res.at(f, r, e));
  return 0.5 * acc;
}

/// Υ_c = (−2ω/c²)(ω/c + α(tan(πy/2) + i)) on the unsmoothed medium.
inline cplx scattering_potential(const Medium& medium, Vec2 x, double omega) {
  const double c = medium.sound_speed().eval(x);
  const double alpha = medium.alpha0().eval(x) * std::pow(omega, medium.y());
  return (-2.0 * omega / (c * c)) * cplx(omega / c + alpha * medium.dispersion_factor(), alpha);
}

struct ScatteringPotential {
  double omega = 0.0;
  Eigen::VectorXcd upsilon;  // per mask node

  static ScatteringPotential on_mask(const Medium& medium, const NodeMask& mask, double omega) {
    ScatteringPotential s;
    s.omega = omega;
    s.upsilon.resize(static_cast<Eigen::Index>(mask.size()));
    for (std::size_t q = 0; q < mask.size(); ++q)
      s.upsilon(static_cast<Eigen::Index>(q)) = scattering_potential(medium, mask.grid.node(mask.nodes[q]), omega);
    return s;
  }
};

/// Everything the Fréchet operator needs for one batch.
struct Linearization {
  NodeMask mask;
  double cell_area = 0.0;
  std::vector<double> omegas;
  std::vector<cplx> source;
  std::vector<GriddedGreens> greens;
  std::vector<ScatteringPotential> potential;
  Eigen::MatrixXd pair_weight;  // n_r × n_e, 1 where the pair enters the sums

  std::size_t n_nodes() const { return mask.size(); }
  std::size_t n_receivers() const { return static_cast<std::size_t>(pair_weight.rows()); }
  std::size_t n_emitters() const { return static_cast<std::size_t>(pair_weight.cols()); }
};

/// Per-frequency perturbation spectra, n_r × n_e each.
using SpectraPerturbation = std::vector<Eigen::MatrixXcd>;

inline Linearization linearize(const Medium& medium, const TransducerRing& ring, const LinkedRaySet& linked,
                               const SourceSpectrum& source, const std::vector<std::uint8_t>* present = nullptr) {
  const ReceiverRays reversed = receiver_rays(linked);
  const std::vector<JacobianSamples> ejac = emitter_jacobians(linked);
  const GriddingPlan plan = build_gridding_plan(medium.grid(), ring, linked, reversed);
  Linearization lin;
  lin.mask = plan.mask;
  lin.cell_area = medium.grid().spacing * medium.grid().spacing;
  lin.omegas = source.frequencies;
  lin.source = source.amplitudes;
  lin.pair_weight = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ring.n_receivers()),
                                          static_cast<Eigen::Index>(ring.n_emitters()));
  for (std::size_t e = 0; e < ring.n_emitters(); ++e)
    for (std::size_t r = 0; r < ring.n_receivers(); ++r) {
      const bool ok = linked.valid[linked.index(e, r)] && (!present || (*present)[r * ring.n_emitters() + e]);
      lin.pair_weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e)) = ok ? 1.0 : 0.0;
    }
  for (double w : source.frequencies) {
    lin.greens.push_back(grid_greens(plan, linked, ejac, reversed, medium, w));
    lin.potential.push_back(ScatteringPotential::on_mask(medium, plan.mask, w));
  }
  return lin;
}

/// δP = F dc, with dc the coefficient perturbation on the mask nodes taken as nodal values.
inline SpectraPerturbation frechet_apply(const Linearization& lin, const Eigen::VectorXd& dc) {
  if (static_cast<std::size_t>(dc.size()) != lin.n_nodes()) throw ConfigError("frechet_apply: dc size mismatch");
  SpectraPerturbation out(lin.omegas.size());
  for (std::size_t f = 0; f < lin.omegas.size(); ++f) {
    const auto& g = lin.greens[f];
    const Eigen::VectorXcd w = lin.potential[f].upsilon.cwiseProduct(dc.cast<cplx>()) * (lin.cell_area * lin.source[f]);
    const Eigen::MatrixXcd scaled = g.emitter * w.asDiagonal();  // n_e × nodes
    out[f] = (g.receiver * scaled.transpose()).cwiseProduct(lin.pair_weight.cast<cplx>());
  }
  return out;
}

/// Fᵀ dP: real node map with ⟨F dc, dP⟩ = ⟨dc, Fᵀ dP⟩ for the real inner
/// product Re Σ a conj(b).
inline Eigen::VectorXd frechet_adjoint_apply(const Linearization& lin, const SpectraPerturbation& dP) {
  if (dP.size() != lin.omegas.size()) throw ConfigError("frechet_adjoint_apply: frequency count mismatch");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lin.n_nodes()));
  for (std::size_t f = 0; f < lin.omegas.size(); ++f) {
    const auto& g = lin.greens[f];
    const Eigen::MatrixXcd B = dP[f].conjugate().cwiseProduct(lin.pair_weight.cast<cplx>());  // n_r × n_e
    const Eigen::MatrixXcd BG = B * g.emitter;                                                 // n_r × nodes
    const Eigen::RowVectorXcd col = g.receiver.cwiseProduct(BG).colwise().sum();
    out += ((lin.cell_area * lin.source[f]) * lin.potential[f].upsilon.cwiseProduct(col.transpose())).real();
  }
  return out;
}

inline Eigen::VectorXd hessian_apply(const Linearization& lin, const Eigen::VectorXd& dc) {
  return frechet_adjoint_apply(lin, frechet_apply(lin, dc));
}

/// Residual spectra of a batch as a perturbation, absent pairs zeroed.
inline SpectraPerturbation as_perturbation(const SpectraSet& s) {
  SpectraPerturbation out(s.n_frequencies());
  for (std::size_t f = 0; f < s.n_frequencies(); ++f) {
    out[f] = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(s.n_receivers), static_cast<Eigen::Index>(s.n_emitters));
    for (std::size_t r = 0; r < s.n_receivers; ++r)
      for (std::size_t e = 0; e < s.n_emitters; ++e)
        if (s.is_present(r, e)) out[f](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e)) = s.at(f, r, e);
  }
  return out;
}

/// Real inner product Re Σ a conj(b) over all frequencies.
inline double inner(const SpectraPerturbation& a, const SpectraPerturbation& b) {
  double acc = 0.0;
  for (std::size_t f = 0; f < a.size(); ++f) acc += (a[f].array() * b[f].array().conjugate()).real().sum();
  return acc;
}

struct CgResult {
  Eigen::VectorXd dc;
  std::vector<double> residual_norms;  // rᵀr before each iteration, then after the last
  unsigned iterations = 0;
  bool curvature_lost = false;
};

/// Conjugate gradients on H dc = −∇F, started from dc = 0.
template <class HessianOp>
CgResult cg_subproblem(const Eigen::VectorXd& gradient, HessianOp&& hessian, unsigned l_max) {
  CgResult out;
  out.dc = Eigen::VectorXd::Zero(gradient.size());
  Eigen::VectorXd r = -gradient;
  Eigen::VectorXd d = r;
  double rr = r.squaredNorm();
  out.residual_norms.push_back(rr);
  const double rr_floor = std::max(std::numeric_limits<double>::min(), 1e-30 * rr);  // roundoff level
  for (unsigned l = 0; l < l_max; ++l) {
    if (!(rr > rr_floor)) break;
    const Eigen::VectorXd z = hessian(d);
    const double dz = d.dot(z);
    if (!(dz > 0.0)) {
      out.curvature_lost = true;
      break;
    }
    const double alpha = rr / dz;
    out.dc += alpha * d;
    r -= alpha * z;
    const double rr_next = r.squaredNorm();
    out.residual_norms.push_back(rr_next);
    ++out.iterations;
    const double beta = rr_next / rr;
    d = r + beta * d;
    rr = rr_next;
  }
  return out;
}

inline CgResult cg_subproblem(const Linearization& lin, const Eigen::VectorXd& gradient, unsigned l_max) {
  return cg_subproblem(gradient, [&](const Eigen::VectorXd& v) { return hessian_apply(lin, v); }, l_max);
}

/// ‖image − truth‖ / ‖c0 − truth‖ × 100 over the given flat node indices.
inline double relative_error(const Medium& image, const Medium& truth, const std::vector<std::size_t>& nodes) {
  if (!(image.grid() == truth.grid())) throw ConfigError("relative_error: image and truth grids differ");
  const auto ci = image.sound_speed().coefficients();
  const auto ct = truth.sound_speed().coefficients();
  double num = 0.0, den = 0.0;
  for (std::size_t k : nodes) {
    num += (ci[k] - ct[k]) * (ci[k] - ct[k]);
    den += (truth.c0() - ct[k]) * (truth.c0() - ct[k]);
  }
  if (!(den > 0.0)) throw DomainError("relative_error: truth equals the background inside the mask");
  return 100.0 * std::sqrt(num / den);
}

/// Mask node values written back into a grid-sized coefficient vector.
inline std::vector<double> scatter_to_grid(const NodeMask& mask, const Eigen::VectorXd& v) {
  std::vector<double> out(mask.grid.size(), 0.0);
  for (std::size_t q = 0; q < mask.size(); ++q) out[mask.nodes[q]] = v(static_cast<Eigen::Index>(q));
  return out;
}

inline Eigen::VectorXd gather_from_grid(const NodeMask& mask, std::span<const double> grid_values) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(mask.size()));
  for (std::size_t q = 0; q < mask.size(); ++q) v(static_cast<Eigen::Index>(q)) = grid_values[mask.nodes[q]];
  return v;
}

struct InversionConfig {
  int window = 7;            // smoothing of the wavenumber map used for ray geometry
  int update_window = 7;     // averaging applied to each Gauss-Newton update, 1 = none
  LinkConfig link;           // link.step defaults to the grid spacing when zero
  unsigned l_max = 10;
  bool step_halving = true;  // one halving when a batch increases the objective
  double c_min = Medium::min_speed;
  double c_max = Medium::max_speed;
  std::optional<Medium> truth;            // enables RE tracking
  std::vector<std::size_t> metric_nodes;  // RE mask; defaults to the update mask
  std::function<void(const std::string&)> log;
};

struct BatchRecord {
  std::size_t index = 0;
  double f_low_hz = 0.0, f_high_hz = 0.0;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double relative_error = std::numeric_limits<double>::quiet_NaN();
  unsigned cg_iterations = 0;
  bool curvature_lost = false;
  bool halved = false;
  bool objective_increased = false;  // still above the starting value after halving
  unsigned long link_iterations = 0;
  std::size_t link_failures = 0;
  double gradient_norm = 0.0;
  double seconds = 0.0;
  std::vector<double> cg_residuals;
};

struct InversionState {
  Medium model;
  std::optional<LinkedRaySet> linked;  // warm-start angles
  std::vector<BatchRecord> history;
  std::size_t batch_index = 0;
};

namespace detail {

inline double batch_objective(const Medium& m, const TransducerRing& ring, const SourceSpectrum& src,
                              const SpectraSet& measured, const LinkedRaySet& linked) {
  return objective(residual(forward_model(m, ring, src, linked), measured));
}

inline double center_frequency(const std::vector<double>& w) {
  double s = 0.0;
  for (double v : w) s += v;
  return s / static_cast<double>(w.size());
}

}  // namespace detail

/// Runs one linearised subproblem on the frequencies [begin, end) and updates the state.
inline const BatchRecord& invert_batch(InversionState& state, const SpectraSet& measured, const SourceSpectrum& source,
                                       std::size_t begin, std::size_t end, const InversionConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const TransducerRing& ring = measured.ring;
  LinkConfig lc = cfg.link;
  if (!(lc.step > 0.0)) lc.step = state.model.grid().spacing;
  lc.receiver_aux = true;
  const SourceSpectrum src = source.subset(begin, end);
  const SpectraSet meas = measured.slice(begin, end);
  const double w_center = detail::center_frequency(src.frequencies);

  BatchRecord rec;
  rec.index = state.batch_index;
  rec.f_low_hz = src.frequencies.front() / (2 * pi);
  rec.f_high_hz = src.frequencies.back() / (2 * pi);

  const RayModel rm = RayModel::make(state.model, w_center, cfg.window);
  LinkedRaySet linked = link_all(rm, ring, lc, state.linked ? &*state.linked : nullptr);
  rec.link_iterations = linked.total_iterations();
  rec.link_failures = linked.failures;
  const SpectraSet res = residual(forward_model(state.model, ring, src, linked), meas);
  rec.objective_before = objective(res);

  const Linearization lin = linearize(state.model, ring, linked, src, &meas.present);
  const Eigen::VectorXd grad = frechet_adjoint_apply(lin, as_perturbation(res));
  rec.gradient_norm = grad.norm();
  const CgResult cg = cg_subproblem(lin, grad, cfg.l_max);
  rec.cg_iterations = cg.iterations;
  rec.curvature_lost = cg.curvature_lost;
  rec.cg_residuals = cg.residual_norms;
  Eigen::VectorXd dc = cg.dc;
  if (cfg.update_window > 1) {
    const ScalarField raw(state.model.grid(), scatter_to_grid(lin.mask, dc));
    dc = gather_from_grid(lin.mask, smooth_field(raw, cfg.update_window).coefficients());
  }

  auto updated = [&](double scale) {
    std::vector<double> c(state.model.sound_speed().coefficients().begin(), state.model.sound_speed().coefficients().end());
    for (std::size_t q = 0; q < lin.mask.size(); ++q) {
      double& v = c[lin.mask.nodes[q]];
      v = std::min(cfg.c_max, std::max(cfg.c_min, v + scale * dc(static_cast<Eigen::Index>(q))));
    }
    return state.model.with_sound_speed(ScalarField(state.model.grid(), std::move(c)));
  };
  auto evaluate = [&](const Medium& m, LinkedRaySet& out_linked) {
    const RayModel rmn = RayModel::make(m, w_center, cfg.window);
    out_linked = link_all(rmn, ring, lc, &linked);
    return detail::batch_objective(m, ring, src, meas, out_linked);
  };

  Medium next = updated(1.0);
  LinkedRaySet next_linked;
  double f_next = evaluate(next, next_linked);
  if (f_next > rec.objective_before && cfg.step_halving) {
    if (cfg.log) {
      std::ostringstream os;
      os << "batch " << rec.index << ": objective rose " << rec.objective_before << " -> " << f_next
         << ", halving the step";
      cfg.log(os.str());
    }
    rec.halved = true;
    next = updated(0.5);
    f_next = evaluate(next, next_linked);
    if (f_next > rec.objective_before && cfg.log) {
      std::ostringstream os;
      os << "batch " << rec.index << ": objective still above its start after halving (" << f_next
         << "), accepting";
      cfg.log(os.str());
    }
  }
  rec.objective_increased = f_next > rec.objective_before;
  rec.objective_after = f_next;
  state.model = std::move(next);
  state.linked = std::move(next_linked);
  if (cfg.truth) {
    const auto& nodes = cfg.metric_nodes.empty() ? lin.mask.nodes : cfg.metric_nodes;
    rec.relative_error = relative_error(state.model, *cfg.truth, nodes);
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  state.history.push_back(std::move(rec));
  ++state.batch_index;
  return state.history.back();
}

struct InversionResult {
  Medium model;
  std::vector<BatchRecord> history;
};

/// Low-to-high (or reversed, per schedule) sequence of Gauss-Newton subproblems.
inline InversionResult invert(const SpectraSet& measured, const Medium& init, const SourceSpectrum& source,
                              const FrequencySchedule& schedule, const InversionConfig& cfg) {
  schedule.validate();
  source.validate();
  if (source.frequencies != measured.frequencies) throw ConfigError("invert: source and measured frequencies differ");
  // Map schedule frequencies onto measured indices.
  std::vector<std::size_t> index(schedule.frequencies.size());
  for (std::size_t i = 0; i < schedule.frequencies.size(); ++i) {
    const double w = schedule.frequencies[i];
    std::size_t best = measured.n_frequencies();
    for (std::size_t j = 0; j < measured.n_frequencies(); ++j)
      if (std::abs(measured.frequencies[j] - w) <= 1e-9 * w) best = j;
    if (best == measured.n_frequencies()) throw ConfigError("invert: measured spectra do not cover the schedule");
    index[i] = best;
  }
  for (std::size_t i = 1; i < index.size(); ++i)
    if (index[i] != index[i - 1] + 1) throw ConfigError("invert: schedule frequencies must be contiguous in the data");

  InversionState state;
  state.model = init;
  for (std::size_t n = 0; n < schedule.n_batches(); ++n) {
    const auto [b, e] = schedule.batch(n);
    const BatchRecord& rec = invert_batch(state, measured, source, index[b], index[e - 1] + 1, cfg);
    if (cfg.log) {
      std::ostringstream os;
      os << "batch " << rec.index << " [" << rec.f_low_hz / 1e6 << ", " << rec.f_high_hz / 1e6 << "] MHz  F "
         << rec.objective_before << " -> " << rec.objective_after << "  cg " << rec.cg_iterations;
      if (std::isfinite(rec.relative_error)) os << "  RE " << rec.relative_error << "%";
      cfg.log(os.str());
    }
  }
  return {std::move(state.model), std::move(state.history)};
}

}  // namespace ustray
