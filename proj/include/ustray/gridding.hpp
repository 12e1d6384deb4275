#pragma once

// Transfer of ray-sampled Green's functions onto grid nodes.
//
// Each source (an emitter, or a receiver for the reversed rays) owns a fan of
// rays. Neighbouring rays of the fan, ordered by exit angle, are stitched into
// triangle strips by merging their arc-length samples; nodes are then assigned
// barycentric weights of the first triangle that contains them. The weights only
// depend on the ray geometry and are reused for every frequency of a batch.
//
// Interpolated quantities are the phase and amplitude with the homogeneous
// point-source behaviour factored out,
//   φ̂ = φ − k_ref r,   Â = A sqrt(8π k_ref r),   k_ref = ω / c0,
// which are smooth across the fan and reproduce a homogeneous medium exactly.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/field.hpp"
#include "ustray/greens.hpp"
#include "ustray/linking.hpp"
#include "ustray/parallel.hpp"

namespace ustray {

/// Grid nodes strictly inside the ring, at least one spacing away from it.
struct NodeMask {
  Grid2D grid;
  std::vector<std::size_t> nodes;  // flat grid indices
  std::vector<long> position;      // flat index -> slot in nodes, or -1

  static NodeMask inside_ring(const Grid2D& grid, const TransducerRing& ring) {
    NodeMask m;
    m.grid = grid;
    m.position.assign(grid.size(), -1);
    const double limit = ring.radius - grid.spacing;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const Vec2 x = grid.node(k);
      if (distance(x, ring.center) < limit && grid.in_interior(x)) {
        m.position[k] = static_cast<long>(m.nodes.size());
        m.nodes.push_back(k);
      }
    }
    return m;
  }

  std::size_t size() const { return nodes.size(); }
};

struct NodeWeights {
  std::array<std::uint32_t, 4> ray{};    // ray index in the linked set
  std::array<std::uint32_t, 4> point{};  // sample index along that ray
  std::array<double, 4> w{};
};

struct FanInterpolant {
  Vec2 source;
  std::vector<std::uint32_t> slot;  // covered mask slots
  std::vector<NodeWeights> weights;
  bool idw = false;  // fell back to inverse-distance weighting
  std::size_t degenerate_triangles = 0;
};

struct GriddingPlan {
  NodeMask mask;
  std::vector<FanInterpolant> emitter_fans;
  std::vector<FanInterpolant> receiver_fans;

  /// Fraction of mask nodes covered, averaged over all fans.
  double mean_coverage() const {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto* fans : {&emitter_fans, &receiver_fans})
      for (const auto& f : *fans) {
        acc += static_cast<double>(f.slot.size()) / static_cast<double>(mask.size());
        ++n;
      }
    return n ? acc / static_cast<double>(n) : 0.0;
  }

  std::size_t idw_fans() const {
    std::size_t n = 0;
    for (const auto* fans : {&emitter_fans, &receiver_fans})
      for (const auto& f : *fans) n += f.idw ? 1 : 0;
    return n;
  }
};

namespace detail {

struct FanRay {
  std::uint32_t id;
  const Ray* ray;
  double key;  // sort key: exit angle about the ring from the source
};

inline FanInterpolant build_fan(Vec2 source, std::vector<FanRay> rays, const NodeMask& mask) {
  FanInterpolant fan;
  fan.source = source;
  std::sort(rays.begin(), rays.end(), [](const FanRay& a, const FanRay& b) { return a.key < b.key; });
  const Grid2D& g = mask.grid;
  std::vector<long> assigned(mask.size(), -1);
  std::size_t good_triangles = 0;

  auto raster = [&](std::uint32_t ra, std::uint32_t pa, Vec2 a, std::uint32_t rb, std::uint32_t pb, Vec2 b,
                    std::uint32_t rc, std::uint32_t pc, Vec2 c) {
    const double det = cross(b - a, c - a);
    const double scale = std::max({distance(a, b), distance(b, c), distance(c, a)});
    if (!(std::abs(det) > 1e-12 * scale * scale)) {
      ++fan.degenerate_triangles;
      return;
    }
    ++good_triangles;
    const double lo1 = std::min({a.x, b.x, c.x}), hi1 = std::max({a.x, b.x, c.x});
    const double lo2 = std::min({a.y, b.y, c.y}), hi2 = std::max({a.y, b.y, c.y});
    const long i0 = std::max(0L, static_cast<long>(std::ceil((lo1 - g.origin.x) / g.spacing - 1e-9)));
    const long i1 = std::min(static_cast<long>(g.n1) - 1, static_cast<long>(std::floor((hi1 - g.origin.x) / g.spacing + 1e-9)));
    const long j0 = std::max(0L, static_cast<long>(std::ceil((lo2 - g.origin.y) / g.spacing - 1e-9)));
    const long j1 = std::min(static_cast<long>(g.n2) - 1, static_cast<long>(std::floor((hi2 - g.origin.y) / g.spacing + 1e-9)));
    for (long i = i0; i <= i1; ++i)
      for (long j = j0; j <= j1; ++j) {
        const std::size_t flat = g.index(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        const long slot = mask.position[flat];
        if (slot < 0 || assigned[static_cast<std::size_t>(slot)] >= 0) continue;
        const Vec2 x = g.node(flat);
        const double la = cross(b - x, c - x) / det;
        const double lb = cross(c - x, a - x) / det;
        const double lc = 1.0 - la - lb;
        const double eps = -1e-12;
        if (la < eps || lb < eps || lc < eps) continue;
        assigned[static_cast<std::size_t>(slot)] = static_cast<long>(fan.slot.size());
        fan.slot.push_back(static_cast<std::uint32_t>(slot));
        NodeWeights nw;
        nw.ray = {ra, rb, rc, ra};
        nw.point = {pa, pb, pc, pa};
        nw.w = {la, lb, lc, 0.0};
        fan.weights.push_back(nw);
      }
  };

  for (std::size_t q = 0; q + 1 < rays.size(); ++q) {
    const Ray& A = *rays[q].ray;
    const Ray& B = *rays[q + 1].ray;
    const std::uint32_t ia = rays[q].id, ib = rays[q + 1].id;
    const std::size_t Ma = A.size() - 1, Mb = B.size() - 1;
    std::size_t i = 1, j = 1;
    raster(ia, 0, A.points[0], ia, 1, A.points[1], ib, 1, B.points[1]);
    while (i < Ma || j < Mb) {
      const bool advance_a = j == Mb || (i < Ma && A.arc_lengths[i + 1] <= B.arc_lengths[j + 1]);
      if (advance_a) {
        raster(ia, static_cast<std::uint32_t>(i), A.points[i], ib, static_cast<std::uint32_t>(j), B.points[j], ia,
               static_cast<std::uint32_t>(i + 1), A.points[i + 1]);
        ++i;
      } else {
        raster(ia, static_cast<std::uint32_t>(i), A.points[i], ib, static_cast<std::uint32_t>(j), B.points[j], ib,
               static_cast<std::uint32_t>(j + 1), B.points[j + 1]);
        ++j;
      }
    }
  }

  if (good_triangles == 0 && !rays.empty()) {
    // Collinear or single-ray fan: weight the four nearest ray samples.
    const std::size_t degenerate = fan.degenerate_triangles;
    fan = FanInterpolant{};
    fan.source = source;
    fan.idw = true;
    fan.degenerate_triangles = degenerate;
    for (std::size_t slot = 0; slot < mask.size(); ++slot) {
      const Vec2 x = g.node(mask.nodes[slot]);
      std::array<double, 4> best_d;
      best_d.fill(std::numeric_limits<double>::infinity());
      NodeWeights nw;
      for (const auto& fr : rays)
        for (std::size_t m = 0; m < fr.ray->size(); ++m) {
          const double d = distance(x, fr.ray->points[m]);
          if (d >= best_d[3]) continue;
          std::size_t pos = 3;
          while (pos > 0 && best_d[pos - 1] > d) {
            best_d[pos] = best_d[pos - 1];
            nw.ray[pos] = nw.ray[pos - 1];
            nw.point[pos] = nw.point[pos - 1];
            --pos;
          }
          best_d[pos] = d;
          nw.ray[pos] = fr.id;
          nw.point[pos] = static_cast<std::uint32_t>(m);
        }
      if (best_d[0] == 0.0) {
        nw.w = {1.0, 0.0, 0.0, 0.0};
      } else {
        double total = 0.0;
        for (std::size_t q = 0; q < 4; ++q) {
          nw.w[q] = std::isfinite(best_d[q]) ? 1.0 / (best_d[q] * best_d[q]) : 0.0;
          total += nw.w[q];
        }
        for (double& w : nw.w) w /= total;
      }
      fan.slot.push_back(static_cast<std::uint32_t>(slot));
      fan.weights.push_back(nw);
    }
  }
  return fan;
}

}  // namespace detail

/// Triangulation weights for every emitter fan (linked rays) and receiver fan
/// (reversed rays).
inline GriddingPlan build_gridding_plan(const Grid2D& grid, const TransducerRing& ring, const LinkedRaySet& linked,
                                        const ReceiverRays& reversed) {
  GriddingPlan plan;
  plan.mask = NodeMask::inside_ring(grid, ring);
  const std::size_t ne = linked.n_emitters, nr = linked.n_receivers;
  plan.emitter_fans.resize(ne);
  plan.receiver_fans.resize(nr);
  parallel_for(ne + nr, [&](std::size_t job) {
    std::vector<detail::FanRay> rays;
    if (job < ne) {
      const std::size_t e = job;
      const double psi = ring.polar_angle(ring.emitters[e]);
      for (std::size_t r = 0; r < nr; ++r) {
        const std::size_t i = linked.index(e, r);
        if (!linked.valid[i]) continue;
        rays.push_back({static_cast<std::uint32_t>(i), &linked.rays[i],
                        wrap_two_pi(ring.polar_angle(ring.receivers[r]) - psi)});
      }
      plan.emitter_fans[e] = detail::build_fan(ring.emitters[e], std::move(rays), plan.mask);
    } else {
      const std::size_t r = job - ne;
      const double psi = ring.polar_angle(ring.receivers[r]);
      for (std::size_t e = 0; e < ne; ++e) {
        const std::size_t i = linked.index(e, r);
        if (!linked.valid[i]) continue;
        rays.push_back({static_cast<std::uint32_t>(i), &reversed.rays[i],
                        wrap_two_pi(ring.polar_angle(ring.emitters[e]) - psi)});
      }
      plan.receiver_fans[r] = detail::build_fan(ring.receivers[r], std::move(rays), plan.mask);
    }
  });
  return plan;
}

/// Gridded Green's functions at one frequency: rows are sources, columns mask slots.
struct GriddedGreens {
  double omega = 0.0;
  Eigen::MatrixXcd emitter;   // g(x; x_e), n_e x n_nodes
  Eigen::MatrixXcd receiver;  // g(x_r; x), n_r x n_nodes
};

namespace detail {

struct FactoredSamples {
  std::vector<double> phase_hat;
  std::vector<double> amp_hat;
};

inline FactoredSamples factor_samples(const Ray& ray, const RayGreens& g, double k_ref) {
  FactoredSamples f;
  const std::size_t n = ray.size();
  f.phase_hat.resize(n);
  f.amp_hat.resize(n);
  for (std::size_t m = 0; m < n; ++m) {
    const double r = distance(ray.points[m], ray.points[0]);
    f.phase_hat[m] = g.phase[m] - k_ref * r;
    f.amp_hat[m] = g.amplitude(m) * std::sqrt(8.0 * pi * k_ref * r);
  }
  if (n > 1) f.amp_hat[0] = f.amp_hat[1];
  return f;
}

inline void fill_row(Eigen::Ref<Eigen::RowVectorXcd, 0, Eigen::InnerStride<>> row, const FanInterpolant& fan, const NodeMask& mask,
                     const std::vector<FactoredSamples>& samples, double k_ref) {
  row.setZero();
  for (std::size_t q = 0; q < fan.slot.size(); ++q) {
    const NodeWeights& nw = fan.weights[q];
    double ph = 0.0, am = 0.0;
    for (std::size_t v = 0; v < 4; ++v) {
      if (nw.w[v] == 0.0) continue;
      const auto& s = samples[nw.ray[v]];
      ph += nw.w[v] * s.phase_hat[nw.point[v]];
      am += nw.w[v] * s.amp_hat[nw.point[v]];
    }
    const Vec2 x = mask.grid.node(mask.nodes[fan.slot[q]]);
    const double r = distance(x, fan.source);
    row(static_cast<Eigen::Index>(fan.slot[q])) = std::polar(am / std::sqrt(8.0 * pi * k_ref * r), ph + k_ref * r + pi / 4.0);
  }
}

}  // namespace detail

/// Emitter-side and receiver-side Green's functions on the mask nodes at ω.
inline GriddedGreens grid_greens(const GriddingPlan& plan, const LinkedRaySet& linked,
                                 const std::vector<JacobianSamples>& emitter_jac, const ReceiverRays& reversed,
                                 const Medium& medium, double omega) {
  const std::size_t n = linked.size();
  const double k_ref = omega / medium.c0();
  std::vector<detail::FactoredSamples> fwd(n), bwd(n);
  parallel_for(n, [&](std::size_t i) {
    if (!linked.valid[i]) return;
    fwd[i] = detail::factor_samples(linked.rays[i], ray_greens(linked.rays[i], emitter_jac[i], medium, omega), k_ref);
    bwd[i] = detail::factor_samples(reversed.rays[i], ray_greens(reversed.rays[i], reversed.jacobians[i], medium, omega),
                                   k_ref);
  });
  GriddedGreens out;
  out.omega = omega;
  const auto nn = static_cast<Eigen::Index>(plan.mask.size());
  out.emitter.resize(static_cast<Eigen::Index>(plan.emitter_fans.size()), nn);
  out.receiver.resize(static_cast<Eigen::Index>(plan.receiver_fans.size()), nn);
  const std::size_t ne = plan.emitter_fans.size();
  parallel_for(ne + plan.receiver_fans.size(), [&](std::size_t job) {
    if (job < ne)
      detail::fill_row(out.emitter.row(static_cast<Eigen::Index>(job)), plan.emitter_fans[job], plan.mask, fwd, k_ref);
    else
      detail::fill_row(out.receiver.row(static_cast<Eigen::Index>(job - ne)), plan.receiver_fans[job - ne], plan.mask,
                       bwd, k_ref);
  });
  return out;
}

}  // namespace ustray
