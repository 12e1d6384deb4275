#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "ustray/ray.hpp"

using namespace ustray;

namespace {

constexpr double kOmega = 2 * pi * 1e6;

Grid2D test_grid() { return Grid2D::centered({0, 0}, 1e-3, 71); }

ScalarField gradient_k(double c0, double g) {
  return oracle::interpolating_field_x1(test_grid(), [&](double x1) { return kOmega / (c0 * (1 + g * x1)); });
}

TraceOptions ring_opts(double step, double R = 0.027) {
  TraceOptions o;
  o.step = step;
  o.ring_radius = R;
  return o;
}

TraceOptions length_opts(double step, double L) {
  TraceOptions o;
  o.step = step;
  o.target_length = L;
  return o;
}

}  // namespace

TEST(Trace, HomogeneousIsStraightAndUnitSpeed) {
  const auto k = ScalarField::constant(test_grid(), kOmega / 1500);
  const Vec2 xe{0.027, 0.0};
  for (double th : {pi, pi - 0.7, pi + 1.2}) {
    const Ray r = trace_ray(k, xe, th, ring_opts(1e-3));
    const Vec2 d = unit_from_angle(th);
    for (std::size_t m = 0; m < r.size(); ++m) EXPECT_NEAR(std::abs(cross(r.points[m] - xe, d)), 0.0, 1e-9);
    for (std::size_t m = 0; m + 2 < r.size(); ++m)
      EXPECT_NEAR(distance(r.points[m + 1], r.points[m]), 1e-3, 1e-9);
    EXPECT_NEAR(distance(r.end(), {0, 0}), 0.027, 1e-12);
    EXPECT_GT(r.last_step, 0.0);
    EXPECT_LE(r.last_step, 1e-3 * (1 + 1e-12));
    EXPECT_EQ(r.points.front(), xe);
    // Chord through the circle: 2 R cos(angle from the normal).
    EXPECT_NEAR(r.length(), 2 * 0.027 * std::cos(th - pi), 1e-12);
  }
}

TEST(Trace, TangentsAreUnitInHeterogeneousMedium) {
  const auto k = gradient_k(1500, 5.0);
  const Ray r = trace_ray(k, {-0.02, 0.0}, pi / 3, length_opts(1e-3, 0.04));
  double kappa_max = 0;
  for (std::size_t m = 0; m < r.size(); ++m) EXPECT_NEAR(norm(r.tangents[m]), 1.0, 1e-12);
  for (std::size_t m = 0; m + 1 < r.size(); ++m) {
    const double turn = std::abs(std::asin(std::min(1.0, std::abs(cross(r.tangents[m], r.tangents[m + 1])))));
    kappa_max = std::max(kappa_max, turn / 1e-3);
  }
  // Heun chords fall short of the step by Δs (1 - cos(δ/2)), δ the turn per step.
  for (std::size_t m = 0; m + 2 < r.size(); ++m) {
    const double chord = distance(r.points[m + 1], r.points[m]);
    EXPECT_LE(chord, 1e-3 * (1 + 1e-12));
    EXPECT_LE(1e-3 - chord, 1e-3 * std::pow(1e-3 * kappa_max, 2) / 4 + 1e-15);
  }
}

TEST(Trace, ConstantGradientArcSecondOrder) {
  const double c0 = 1500, g = 5.0;
  const auto k = gradient_k(c0, g);
  const Vec2 xs{-0.015, -0.015};
  const double th = pi / 4, L = 0.04;
  const oracle::GradientArc arc(c0, g, xs, th);
  std::vector<double> steps, errs, phase_errs;
  for (double ds : {1e-3, 5e-4, 2.5e-4, 1.25e-4}) {
    Ray r = trace_ray(k, xs, th, length_opts(ds, L));
    ASSERT_FALSE(r.truncated);
    ASSERT_NEAR(r.length(), L, 1e-15);
    steps.push_back(ds);
    errs.push_back(distance(r.end(), arc.at(L)));
    r.k_samples.resize(r.size());
    for (std::size_t m = 0; m < r.size(); ++m) r.k_samples[m] = k.eval(r.points[m]);
    phase_errs.push_back(std::abs(acoustic_length(r) - arc.acoustic_length(L, kOmega)));
  }
  const double slope = oracle::loglog_slope(steps, errs);
  EXPECT_NEAR(slope, 2.0, 0.2) << errs[0] << " " << errs[3];
  EXPECT_NEAR(errs[0] / errs[1], 4.0, 0.8);
  EXPECT_LT(phase_errs[3], phase_errs[0]);
  EXPECT_LT(phase_errs[0] / arc.acoustic_length(L, kOmega), 1e-5);
}

TEST(Trace, PathIndependentOfFrequencyForYTwo) {
  const Grid2D g = test_grid();
  std::vector<double> c(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec2 x = g.node(i);
    c[i] = 1500 + 60 * std::exp(-(x.x * x.x + (x.y - 0.004) * (x.y - 0.004)) / (2 * 0.008 * 0.008));
  }
  const Medium m(ScalarField(g, c), 1500, ScalarField::constant(g, 1e-12), 2.0);
  const RayModel a = RayModel::make(m, 2 * pi * 3e5, 7);
  const RayModel b = RayModel::make(m, 2 * pi * 1.4e6, 7);
  const Ray ra = trace_ray(a, {0.027, 0}, pi + 0.1, ring_opts(1e-3));
  const Ray rb = trace_ray(b, {0.027, 0}, pi + 0.1, ring_opts(1e-3));
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_LT(distance(ra.points[i], rb.points[i]), 1e-10);
}

TEST(Trace, ExitLandsOnCircle) {
  const auto k = gradient_k(1500, 3.0);
  const Ray r = trace_ray(k, {0.027, 0}, pi - 0.4, ring_opts(1e-3));
  EXPECT_NEAR(distance(r.end(), {0, 0}), 0.027, 1e-15);
  EXPECT_GT(r.last_step, 0.0);
  EXPECT_LE(r.last_step, 1e-3);
  for (std::size_t m = 1; m + 1 < r.size(); ++m) EXPECT_LT(distance(r.points[m], {0, 0}), 0.027);
}

TEST(Trace, ErrorCases) {
  const auto k = ScalarField::constant(test_grid(), kOmega / 1500);
  EXPECT_THROW(trace_ray(k, {0.027, 0}, 0.0, ring_opts(1e-3)), DomainError);  // points outward
  EXPECT_THROW(trace_ray(k, {0.027, 0}, pi, ring_opts(0.0)), ConfigError);
  EXPECT_THROW(trace_ray(k, {0.027, 0}, pi, ring_opts(0.05)), ConfigError);
  EXPECT_THROW(trace_ray(k, {0.04, 0}, pi, length_opts(1e-3, 0.01)), DomainError);
  std::vector<double> bad(test_grid().size(), kOmega / 1500);
  bad[test_grid().index(35, 35)] = -1e9;
  EXPECT_THROW(trace_ray(ScalarField(test_grid(), bad), {0.027, 0}, pi, ring_opts(1e-3)), NumericalError);
}

TEST(Trace, GrazingRayIsShort) {
  const auto k = ScalarField::constant(test_grid(), kOmega / 1500);
  const double th = pi / 2 + 1e-4;  // nearly tangent at (R, 0)
  const Ray r = trace_ray(k, {0.027, 0}, th, ring_opts(1e-3));
  EXPECT_GE(r.size(), 2u);
  EXPECT_NEAR(r.length(), 2 * 0.027 * std::cos(th - pi), 1e-12);
}

TEST(Trace, FirstStepOption) {
  const auto k = ScalarField::constant(test_grid(), kOmega / 1500);
  TraceOptions o = length_opts(1e-3, 0.0103);
  o.first_step = 3e-4;
  const Ray r = trace_ray(k, {0, 0}, 0.3, o);
  EXPECT_NEAR(r.arc_lengths[1], 3e-4, 1e-18);
  EXPECT_NEAR(r.arc_lengths[2], 1.3e-3, 1e-15);
  EXPECT_NEAR(r.length(), 0.0103, 1e-15);
  EXPECT_EQ(r.size(), 12u);
}

TEST(AcousticLength, HomogeneousAndDegenerate) {
  const Grid2D g = test_grid();
  const Medium m = Medium::homogeneous(g, 1500);
  const RayModel rm = RayModel::make(m, kOmega, 7);
  const Ray r = trace_ray(rm, {0.027, 0}, pi - 0.3, ring_opts(1e-3));
  EXPECT_NEAR(acoustic_length(r) / (kOmega / 1500 * distance(r.end(), r.points.front())), 1.0, 1e-6);

  Ray two;
  two.points = {{0, 0}, {2e-4, 0}};
  two.arc_lengths = {0, 2e-4};
  two.k_samples = {4000, 4000};
  EXPECT_DOUBLE_EQ(acoustic_length(two), 4000 * 2e-4);
  Ray one;
  one.points = {{0, 0}};
  one.arc_lengths = {0};
  one.k_samples = {1};
  EXPECT_THROW(acoustic_length(one), ConfigError);
}
