#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ustray/simulate.hpp"
#include "ustray/tof.hpp"

using namespace ustray;

namespace {

std::vector<double> noise_trace(std::size_t n, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, sd);
  std::vector<double> x(n);
  for (auto& v : x) v = N(rng);
  return x;
}

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

// Sinogram of straight-ray travel-time discrepancies of `m` against water.
TofSinogram straight_sinogram(const Medium& m, const TransducerRing& ring) {
  return model_tof(m, ring, nullptr, m.grid().spacing);
}

Medium blob(const Grid2D& g, double amplitude, double sigma, Vec2 centre) {
  std::vector<double> c(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec2 d = g.node(i) - centre;
    c[i] = 1500.0 + amplitude * std::exp(-dot(d, d) / (2 * sigma * sigma));
  }
  return Medium(ScalarField(g, c), 1500.0, ScalarField::constant(g, 0.0), 2.0);
}

}  // namespace

TEST(Pick, DelayedImpulse) {
  std::vector<double> x(2000, 0.0);
  x[1000] = 1.0;
  const auto k = pick_trace(x);
  ASSERT_TRUE(k.has_value());
  EXPECT_NEAR(*k, 1000.0, 2.0);

  // Same impulse over weak noise, as a time series with an offset start.
  TimeSeriesSet s(2000, 1, 1, 2e-8, -5e-6);
  const auto n = noise_trace(2000, 1e-4, 7);
  for (std::size_t t = 0; t < 2000; ++t) s.at(t, 0, 0) = n[t] + (t == 1000 ? 1.0 : 0.0);
  const ArrivalPicks p = pick_first_arrival(s);
  ASSERT_TRUE(p.valid[0]);
  EXPECT_NEAR(p.time[0], s.t0 + 1000 * s.dt, 2 * s.dt);
}

TEST(Pick, PureNoiseIsMasked) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) EXPECT_FALSE(pick_trace(noise_trace(1500, 1.0, seed)).has_value());
}

TEST(Pick, RejectsShortTracesAndEvenSmoothing) {
  EXPECT_THROW(pick_trace(std::vector<double>(40, 0.0)), ConfigError);
  PickConfig cfg;
  cfg.smoothing = 4;
  EXPECT_THROW(pick_trace(std::vector<double>(500, 0.0), cfg), ConfigError);
}

TEST(Pick, WaterArrivalsWithinOneSample) {
  // Arrival minus straight-path time should be one constant (the onset lag of
  // the pulse shape) for all traces, to within one sample.
  const auto ring = desk::ring();
  const Grid2D g = desk::simulation_grid();
  const Medium water = Medium::homogeneous(g, 1500.0, desk::y);
  SimConfig sim;
  sim.snr_db = 40.0;
  const TimeAxis axis = time_axis_for(ring, sim.pulse, 1400.0);
  const TimeSeriesSet ts = simulate_time_series(water, ring, sim, axis);
  const ArrivalPicks picks = pick_first_arrival(ts);
  std::vector<double> lag;
  for (std::size_t r = 0; r < ring.n_receivers(); ++r)
    for (std::size_t e = 0; e < ring.n_emitters(); ++e) {
      const std::size_t p = picks.pair(r, e);
      ASSERT_TRUE(picks.valid[p]);
      lag.push_back((picks.time[p] - distance(ring.emitters[e], ring.receivers[r]) / 1500.0) / ts.dt);
    }
  const double m = median(lag);
  std::size_t within = 0;
  for (double l : lag) within += std::abs(l - m) <= 1.0 ? 1 : 0;
  EXPECT_GE(static_cast<double>(within), 0.95 * static_cast<double>(lag.size())) << "median lag " << m;
}

TEST(Pick, DecimationKeepsTimeAxis) {
  TimeSeriesSet s(101, 2, 3, 1e-8, 1e-6);
  for (std::size_t i = 0; i < s.samples.size(); ++i) s.samples[i] = static_cast<double>(i);
  const TimeSeriesSet d = s.decimated(2);
  EXPECT_EQ(d.n_samples, 51u);
  EXPECT_DOUBLE_EQ(d.dt, 2e-8);
  for (std::size_t t = 0; t < d.n_samples; ++t) {
    EXPECT_DOUBLE_EQ(d.time(t), s.time(2 * t));
    EXPECT_EQ(d.at(t, 1, 2), s.at(2 * t, 1, 2));
  }
  EXPECT_THROW(s.decimated(0), ConfigError);
}

TEST(Sinogram, DiscrepancyAndMask) {
  ArrivalPicks a, b;
  a.n_receivers = b.n_receivers = 2;
  a.n_emitters = b.n_emitters = 1;
  a.time = {3.0, 5.0};
  b.time = {1.0, 2.0};
  a.valid = {1, 1};
  b.valid = {1, 0};
  const TofSinogram s = tof_discrepancy(a, b);
  EXPECT_EQ(s.tof[0], 2.0);
  EXPECT_EQ(s.mask[1], 0);
  EXPECT_EQ(s.tof[1], 0.0);
  EXPECT_DOUBLE_EQ(s.masked_fraction(), 0.5);
}

TEST(PathLength, StraightRowSumsAreChordLengths) {
  const auto ring = desk::ring();
  const Grid2D g = desk::reconstruction_grid();
  std::vector<Ray> rays;
  for (std::size_t e = 0; e < ring.n_emitters(); ++e)
    for (std::size_t r = 0; r < ring.n_receivers(); ++r)
      rays.push_back(straight_ray(ring.emitters[e], ring.receivers[r], g.spacing));
  std::vector<const Ray*> ptr;
  for (const auto& r : rays) ptr.push_back(&r);
  const SparseRows A = path_length_system(g, ptr);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(A.cols());
  const Eigen::VectorXd sums = A * ones;
  std::size_t i = 0;
  for (std::size_t e = 0; e < ring.n_emitters(); ++e)
    for (std::size_t r = 0; r < ring.n_receivers(); ++r, ++i)
      EXPECT_NEAR(sums(static_cast<Eigen::Index>(i)), distance(ring.emitters[e], ring.receivers[r]), 1e-9);
}

TEST(PathLength, UniformSlownessGivesTravelTime) {
  const auto ring = TransducerRing::uniform({0, 0}, 0.02, 4, 8);
  const Grid2D g = Grid2D::centered({0, 0}, 1e-3, 48);
  const Ray ray = straight_ray(ring.emitters[1], ring.receivers[5], 7e-4);
  const SparseRows A = path_length_system(g, {&ray});
  const Eigen::VectorXd s = Eigen::VectorXd::Constant(A.cols(), 1.0 / 1530.0);
  EXPECT_NEAR((A * s)(0), distance(ring.emitters[1], ring.receivers[5]) / 1530.0, 1e-15);
}

TEST(Cgls, SolvesConsistentOverdeterminedSystem) {
  SparseRows A(4, 2);
  std::vector<Eigen::Triplet<double>> t{{0, 0, 1}, {1, 1, 2}, {2, 0, 1}, {2, 1, 1}, {3, 0, -1}, {3, 1, 3}};
  A.setFromTriplets(t.begin(), t.end());
  const Eigen::Vector2d x(0.5, -1.25);
  const Eigen::VectorXd b = A * x;
  const Eigen::VectorXd sol = cgls(A, b, 10);
  EXPECT_NEAR(sol(0), x(0), 1e-12);
  EXPECT_NEAR(sol(1), x(1), 1e-12);
  EXPECT_EQ(cgls(A, Eigen::VectorXd::Zero(4), 10).norm(), 0.0);
}

TEST(Schedule, ParseAndFormat) {
  const TofSchedule s = TofSchedule::parse("straight:1,bent:6");
  EXPECT_EQ(s.straight, 1u);
  EXPECT_EQ(s.bent, 6u);
  EXPECT_EQ(s.str(), "straight:1,bent:6");
  EXPECT_EQ(TofSchedule::parse("bent:2").straight, 0u);
  EXPECT_EQ(TofSchedule::parse(TofSchedule{}.str()).bent, 3u);
  for (const char* bad : {"", "straight", "straight:x", "curved:2", "bent:2x"})
    EXPECT_THROW(TofSchedule::parse(bad), ConfigError) << bad;
}

TEST(Tof, ZeroSinogramLeavesWaterUnchanged) {
  const auto ring = desk::ring();
  const Grid2D g = desk::reconstruction_grid();
  const Medium water = Medium::homogeneous(g, 1500.0, desk::y);
  const TofSinogram zero(ring.n_receivers(), ring.n_emitters());
  const TofResult out = tof_invert(zero, ring, water, TofConfig{});
  const auto& c = out.model.sound_speed().coefficients();
  for (double v : c) EXPECT_EQ(v, 1500.0);
}

TEST(Tof, RejectsMostlyMaskedSinogram) {
  const auto ring = TransducerRing::uniform({0, 0}, 0.02, 4, 10);
  TofSinogram s(ring.n_receivers(), ring.n_emitters());
  for (std::size_t p = 0; p < 8; ++p) s.mask[p] = 0;
  EXPECT_THROW(tof_invert(s, ring, Medium::homogeneous(Grid2D::centered({0, 0}, 1e-3, 48), 1500.0, 2.0), TofConfig{}),
               ConfigError);
}

TEST(Tof, DiscStraightIterationLowersRelativeError) {
  // Data from bent rays on a finer grid; one straight-ray iteration on the
  // reconstruction grid must move towards the disc.
  const auto ring = desk::ring();
  const Medium fine = make_phantom(desk::simulation_grid(), 1500.0, 2.0, desk::disc_phantom());
  LinkConfig lc;
  lc.step = fine.grid().spacing;
  const LinkedRaySet bent = link_all(RayModel::make(fine, 2 * pi * 1e6, 1), ring, lc);
  const TofSinogram sino = model_tof(fine, ring, &bent, lc.step);

  const Grid2D g = desk::reconstruction_grid();
  const Medium truth = make_phantom(g, 1500.0, 2.0, desk::disc_phantom());
  const Medium water = Medium::homogeneous(g, 1500.0, 2.0);
  TofConfig cfg;
  cfg.schedule = TofSchedule::parse("straight:1");
  cfg.truth = truth;
  const TofResult out = tof_invert(sino, ring, water, cfg);
  ASSERT_EQ(out.history.size(), 1u);
  const auto nodes = NodeMask::inside_ring(g, ring).nodes;
  EXPECT_DOUBLE_EQ(relative_error(water, truth, nodes), 100.0);
  EXPECT_LT(out.history[0].relative_error, 100.0);
  EXPECT_TRUE(out.history[0].accepted);
}

TEST(Tof, SameGridStraightSelfTest) {
  // Smooth map, straight-ray data on the same grid: recovered to RE < 5%.
  const auto ring = desk::ring();
  const Grid2D g = desk::reconstruction_grid();
  const Medium truth = blob(g, 15.0, 0.007, {0.003, -0.002});
  const TofSinogram sino = straight_sinogram(truth, ring);
  TofConfig cfg;
  cfg.schedule = TofSchedule::parse("straight:1,bent:4");
  cfg.truth = truth;
  const TofResult out = tof_invert(sino, ring, Medium::homogeneous(g, 1500.0, 2.0), cfg);
  EXPECT_LT(relative_error(out.model, truth, NodeMask::inside_ring(g, ring).nodes), 5.0);
}

namespace {

// Bent-ray travel times on the fine grid, inverted on the reconstruction grid.
TofResult noiseless_ellipse_run() {
  const auto ring = desk::ring();
  const Medium fine = make_phantom(desk::simulation_grid(), 1500.0, 2.0, desk::ellipse_phantom());
  LinkConfig lc;
  lc.step = fine.grid().spacing;
  const LinkedRaySet bent = link_all(RayModel::make(fine, 2 * pi * 1e6, 15), ring, lc);
  const TofSinogram sino = model_tof(fine, ring, &bent, lc.step);
  const Grid2D g = desk::reconstruction_grid();
  TofConfig cfg;
  cfg.schedule = TofSchedule::parse("straight:1,bent:4");
  cfg.truth = make_phantom(g, 1500.0, 2.0, desk::ellipse_phantom());
  return tof_invert(sino, ring, Medium::homogeneous(g, 1500.0, 2.0), cfg);
}

}  // namespace

TEST(Tof, AcceptedIteratesReduceMisfit) {
  const TofResult out = noiseless_ellipse_run();
  ASSERT_GE(out.history.size(), 2u);
  for (const auto& it : out.history) {
    if (it.accepted)
      EXPECT_LT(it.misfit_after, it.misfit_before);
    else
      EXPECT_GE(it.misfit_after, it.misfit_before);
  }
  // Each iteration starts where the previous accepted one ended.
  for (std::size_t i = 1; i < out.history.size(); ++i)
    EXPECT_NEAR(out.history[i].misfit_before, out.history[i - 1].misfit_after, 1e-6 * out.history[i].misfit_before);
  ASSERT_TRUE(out.linked.has_value());
}

TEST(Tof, RelativeErrorDecreasesOverIterations) {
  const TofResult out = noiseless_ellipse_run();
  double re = 100.0;
  for (const auto& it : out.history) {
    if (!it.accepted) continue;
    EXPECT_LT(it.relative_error, re) << "iteration " << it.index;
    re = it.relative_error;
  }
}
