#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/greens.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"

namespace ustray {

struct SourceSpectrum {
  std::vector<double> frequencies;  // rad/s
  std::vector<cplx> amplitudes;     // s(ω), shared by all emitters

  SourceSpectrum() = default;
  SourceSpectrum(std::vector<double> f, std::vector<cplx> a) : frequencies(std::move(f)), amplitudes(std::move(a)) {
    validate();
  }

  std::size_t size() const { return frequencies.size(); }

  void validate() const {
    if (frequencies.size() != amplitudes.size()) throw ConfigError("SourceSpectrum: size mismatch");
    for (std::size_t i = 0; i < frequencies.size(); ++i) {
      if (!(frequencies[i] > 0.0) || !std::isfinite(frequencies[i]))
        throw ConfigError("SourceSpectrum: frequencies must be positive");
      if (i > 0 && !(frequencies[i] > frequencies[i - 1]))
        throw ConfigError("SourceSpectrum: frequencies must be strictly increasing");
    }
  }

  SourceSpectrum subset(std::size_t begin, std::size_t end) const {
    return SourceSpectrum({frequencies.begin() + begin, frequencies.begin() + end},
                          {amplitudes.begin() + begin, amplitudes.begin() + end});
  }

  SourceSpectrum scaled(cplx factor) const {
    SourceSpectrum s = *this;
    for (auto& a : s.amplitudes) a *= factor;
    return s;
  }
};

/// Complex receiver amplitudes, index (ω, r, e) with e fastest.
struct SpectraSet {
  std::vector<double> frequencies;
  TransducerRing ring;
  std::size_t n_receivers = 0;
  std::size_t n_emitters = 0;
  std::vector<cplx> values;
  std::vector<std::uint8_t> present;  // per (r, e)

  SpectraSet() = default;
  SpectraSet(std::vector<double> f, TransducerRing rg)
      : frequencies(std::move(f)), ring(std::move(rg)), n_receivers(ring.n_receivers()), n_emitters(ring.n_emitters()) {
    values.assign(frequencies.size() * n_receivers * n_emitters, cplx(0.0, 0.0));
    present.assign(n_receivers * n_emitters, 1);
  }

  std::size_t n_frequencies() const { return frequencies.size(); }
  std::size_t pair(std::size_t r, std::size_t e) const { return r * n_emitters + e; }
  std::size_t index(std::size_t f, std::size_t r, std::size_t e) const { return (f * n_receivers + r) * n_emitters + e; }
  cplx& at(std::size_t f, std::size_t r, std::size_t e) { return values[index(f, r, e)]; }
  cplx at(std::size_t f, std::size_t r, std::size_t e) const { return values[index(f, r, e)]; }
  bool is_present(std::size_t r, std::size_t e) const { return present[pair(r, e)] != 0; }

  bool same_shape(const SpectraSet& o) const {
    return n_receivers == o.n_receivers && n_emitters == o.n_emitters && frequencies == o.frequencies;
  }

  /// Frequencies [begin, end) as a new set.
  SpectraSet slice(std::size_t begin, std::size_t end) const {
    SpectraSet s({frequencies.begin() + begin, frequencies.begin() + end}, ring);
    s.present = present;
    const std::size_t per = n_receivers * n_emitters;
    std::copy(values.begin() + begin * per, values.begin() + end * per, s.values.begin());
    return s;
  }
};

/// Modelled spectra at the receivers from a linked ray set: p = g(x_r; x_e) s(ω).
/// The linked geometry is reused for every source frequency; integrals are
/// re-evaluated per frequency on the unsmoothed medium.
inline SpectraSet forward_model(const Medium& medium, const TransducerRing& ring, const SourceSpectrum& source,
                                const LinkedRaySet& linked) {
  source.validate();
  if (linked.n_emitters != ring.n_emitters() || linked.n_receivers != ring.n_receivers())
    throw ConfigError("forward_model: linked set does not match the ring");
  SpectraSet out(source.frequencies, ring);
  const std::size_t nf = source.size();
  parallel_for(linked.size(), [&](std::size_t i) {
    const std::size_t e = i / linked.n_receivers, r = i % linked.n_receivers;
    if (!linked.valid[i]) {
      out.present[out.pair(r, e)] = 0;
      return;
    }
    const Ray& ray = linked.rays[i];
    const JacobianSamples jac = ray_jacobian(ray, linked.aux_plus[i], linked.aux_minus[i], linked.delta_theta);
    for (std::size_t f = 0; f < nf; ++f)
      out.at(f, r, e) = greens_at_end(ray, jac, medium, source.frequencies[f]) * source.amplitudes[f];
  });
  return out;
}

}  // namespace ustray
