#include <gtest/gtest.h>

#include <cmath>

#include "ustray/gridding.hpp"

using namespace ustray;

namespace {

constexpr double kOmega = 2 * pi * 1e6;

struct Rig {
  Grid2D grid;
  TransducerRing ring;
  Medium medium;
  LinkedRaySet linked;
  ReceiverRays reversed;
  std::vector<JacobianSamples> ejac;
  GriddingPlan plan;
};

Rig desk(const Medium& m, std::size_t ne = 16, std::size_t nr = 64) {
  Rig s{m.grid(), TransducerRing::uniform({0, 0}, 0.027, ne, nr), m, {}, {}, {}, {}};
  LinkConfig cfg;
  cfg.step = s.grid.spacing;
  s.linked = link_all(RayModel::make(m, kOmega, 7), s.ring, cfg);
  s.reversed = receiver_rays(s.linked);
  s.ejac = emitter_jacobians(s.linked);
  s.plan = build_gridding_plan(s.grid, s.ring, s.linked, s.reversed);
  return s;
}

Grid2D desk_grid() { return Grid2D::centered({0, 0}, 1e-3, 64); }

}  // namespace

TEST(NodeMask, InsideRingOnly) {
  const Grid2D g = desk_grid();
  const auto ring = TransducerRing::uniform({0, 0}, 0.027, 4, 8);
  const NodeMask m = NodeMask::inside_ring(g, ring);
  EXPECT_GT(m.size(), 2000u);
  for (std::size_t q = 0; q < m.size(); ++q) {
    EXPECT_LT(distance(g.node(m.nodes[q]), ring.center), ring.radius - g.spacing);
    EXPECT_EQ(m.position[m.nodes[q]], static_cast<long>(q));
  }
}

TEST(Gridding, DeskScaleCoverage) {
  const Rig s = desk(Medium::homogeneous(desk_grid(), 1500));
  EXPECT_GE(s.plan.mean_coverage(), 0.95);
  EXPECT_EQ(s.plan.idw_fans(), 0u);
  for (const auto& f : s.plan.emitter_fans) EXPECT_GE(static_cast<double>(f.slot.size()) / s.plan.mask.size(), 0.95);
  for (const auto& f : s.plan.receiver_fans) EXPECT_GE(static_cast<double>(f.slot.size()) / s.plan.mask.size(), 0.95);
}

TEST(Gridding, HomogeneousPhaseAndAmplitude) {
  const Medium m = Medium::homogeneous(desk_grid(), 1500);
  const Rig s = desk(m, 8, 32);
  const GriddedGreens gg = grid_greens(s.plan, s.linked, s.ejac, s.reversed, m, kOmega);
  const double k0 = kOmega / 1500;
  for (std::size_t e = 0; e < s.plan.emitter_fans.size(); ++e) {
    const auto& fan = s.plan.emitter_fans[e];
    for (auto slot : fan.slot) {
      const Vec2 x = s.grid.node(s.plan.mask.nodes[slot]);
      const cplx ref = greens_homogeneous_2d(kOmega, x, s.ring.emitters[e], 1500);
      const cplx got = gg.emitter(static_cast<Eigen::Index>(e), slot);
      // Unwrapped phase check on the phase-difference; amplitudes relative.
      EXPECT_LT(std::abs(std::arg(got / ref)), 0.01 * k0 * distance(x, s.ring.emitters[e]));
      EXPECT_LT(std::abs(std::abs(got) / std::abs(ref) - 1.0), 0.01);
    }
  }
  for (std::size_t r = 0; r < s.plan.receiver_fans.size(); ++r)
    for (auto slot : s.plan.receiver_fans[r].slot) {
      const Vec2 x = s.grid.node(s.plan.mask.nodes[slot]);
      const cplx ref = greens_homogeneous_2d(kOmega, x, s.ring.receivers[r], 1500);
      const cplx got = gg.receiver(static_cast<Eigen::Index>(r), slot);
      EXPECT_LT(std::abs(got - ref) / std::abs(ref), 1e-6);
    }
}

TEST(Gridding, UncoveredNodesAreZero) {
  const Medium m = Medium::homogeneous(desk_grid(), 1500);
  const Rig s = desk(m, 4, 8);
  const GriddedGreens gg = grid_greens(s.plan, s.linked, s.ejac, s.reversed, m, kOmega);
  const auto& fan = s.plan.receiver_fans[0];
  ASSERT_LT(fan.slot.size(), s.plan.mask.size());
  std::vector<bool> covered(s.plan.mask.size(), false);
  for (auto q : fan.slot) covered[q] = true;
  for (std::size_t q = 0; q < covered.size(); ++q)
    if (!covered[q]) {
      EXPECT_EQ(gg.receiver(0, static_cast<Eigen::Index>(q)), cplx(0, 0));
    }
}

TEST(Gridding, VertexNodesReproduceSamples) {
  // Straight rays whose samples sit on grid nodes.
  const Grid2D g = Grid2D::centered({0, 0}, 1e-3, 41);
  const auto ring = TransducerRing::uniform({0, 0}, 0.015, 4, 8);
  const NodeMask mask = NodeMask::inside_ring(g, ring);
  const Vec2 src{0.0, -0.014};
  const Ray a = straight_ray(src, {0.0, 0.014}, 1e-3);
  const Ray b = straight_ray(src, {0.014, 0.0}, std::sqrt(2.0) * 1e-3);
  std::vector<detail::FanRay> rays{{0, &a, 0.0}, {1, &b, 1.0}};
  const FanInterpolant fan = detail::build_fan(src, rays, mask);
  ASSERT_FALSE(fan.idw);
  std::size_t vertices = 0;
  for (std::size_t q = 0; q < fan.slot.size(); ++q) {
    const Vec2 x = g.node(mask.nodes[fan.slot[q]]);
    const auto& nw = fan.weights[q];
    double wsum = 0;
    for (double w : nw.w) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-12);
    for (std::size_t v = 0; v < 3; ++v) {
      const Ray& ray = nw.ray[v] == 0 ? a : b;
      if (distance(ray.points[nw.point[v]], x) < 1e-12) {
        EXPECT_NEAR(nw.w[v], 1.0, 1e-9);
        ++vertices;
      }
    }
  }
  EXPECT_GT(vertices, 20u);

  // Interpolated values at those nodes equal the ray samples.
  std::vector<detail::FactoredSamples> samples(2);
  for (int i = 0; i < 2; ++i) {
    const Ray& r = i == 0 ? a : b;
    samples[i].phase_hat.resize(r.size());
    samples[i].amp_hat.resize(r.size());
    for (std::size_t m = 0; m < r.size(); ++m) {
      samples[i].phase_hat[m] = std::sin(1e3 * r.points[m].x) + 3 * r.points[m].y;
      samples[i].amp_hat[m] = 1 + 10 * r.points[m].x;
    }
  }
  Eigen::MatrixXcd row = Eigen::MatrixXcd::Zero(1, static_cast<Eigen::Index>(mask.size()));
  const double kr = 4000;
  detail::fill_row(row.row(0), fan, mask, samples, kr);
  for (std::size_t m = 2; m + 1 < a.size(); ++m) {
    const long slot = mask.position[g.index(20, static_cast<std::size_t>(std::lround((a.points[m].y + 0.02) / 1e-3)))];
    if (slot < 0) continue;
    const Vec2 x = g.node(mask.nodes[slot]);
    const double r = distance(x, src);
    const cplx expect = std::polar(samples[0].amp_hat[m] / std::sqrt(8 * pi * kr * r),
                                   samples[0].phase_hat[m] + kr * r + pi / 4);
    EXPECT_LT(std::abs(row(0, slot) - expect), 1e-9 * std::abs(expect));
  }
}

TEST(Gridding, CollinearFanFallsBackToInverseDistance) {
  const Grid2D g = Grid2D::centered({0, 0}, 1e-3, 41);
  const auto ring = TransducerRing::uniform({0, 0}, 0.015, 4, 8);
  const NodeMask mask = NodeMask::inside_ring(g, ring);
  const Vec2 src{0.0, -0.014};
  const Ray a = straight_ray(src, {0.0, 0.014}, 1e-3);
  const Ray b = straight_ray(src, {0.0, 0.010}, 1e-3);
  const FanInterpolant fan = detail::build_fan(src, {{0, &a, 0.0}, {1, &b, 1.0}}, mask);
  EXPECT_TRUE(fan.idw);
  EXPECT_GT(fan.degenerate_triangles, 0u);
  EXPECT_EQ(fan.slot.size(), mask.size());
  for (const auto& nw : fan.weights) {
    double s = 0;
    for (double w : nw.w) s += w;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Gridding, HeterogeneousGreensIsSmoothAndFinite) {
  const Grid2D g = desk_grid();
  std::vector<double> c(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec2 x = g.node(i);
    c[i] = 1500 * (1 + 0.04 * std::exp(-dot(x, x) / (2 * 0.008 * 0.008)));
  }
  const Medium m(ScalarField(g, c), 1500, ScalarField::constant(g, 0), 2.0);
  const Rig s = desk(m, 8, 32);
  const GriddedGreens gg = grid_greens(s.plan, s.linked, s.ejac, s.reversed, m, kOmega);
  EXPECT_TRUE(gg.emitter.allFinite());
  EXPECT_TRUE(gg.receiver.allFinite());
  // A weak lens keeps the amplitude close to cylindrical spreading everywhere.
  for (std::size_t e = 0; e < s.plan.emitter_fans.size(); ++e)
    for (auto slot : s.plan.emitter_fans[e].slot) {
      const Vec2 x = g.node(s.plan.mask.nodes[slot]);
      const double ratio = std::abs(gg.emitter(static_cast<Eigen::Index>(e), slot)) /
                           std::abs(greens_homogeneous_2d(kOmega, x, s.ring.emitters[e], 1500));
      EXPECT_GT(ratio, 0.5);
      EXPECT_LT(ratio, 2.0);
    }
}
