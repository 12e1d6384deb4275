#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ustray/inversion.hpp"

using namespace ustray;

namespace {

// 32 x 32 toy with an 8 x 16 ring.
struct Toy {
  Grid2D grid = Grid2D::centered({0, 0}, 1e-3, 32);
  TransducerRing ring = TransducerRing::uniform({0, 0}, 0.012, 8, 16);
  Medium model, truth;
  SourceSpectrum source;
  LinkConfig link;

  Toy(double y = 2.0, double alpha_db = 0.0) {
    std::vector<double> c(grid.size()), t(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const Vec2 x = grid.node(i), d = x - Vec2{0.002, -0.001};
      c[i] = 1500 * (1 + 0.02 * std::exp(-dot(x, x) / (2 * 0.004 * 0.004)));
      t[i] = 1500 * (1 + 0.03 * std::exp(-dot(d, d) / (2 * 0.003 * 0.003)));
    }
    const auto a = ScalarField::constant(grid, alpha_db > 0 ? alpha0_db_to_neper(alpha_db, y) : 0.0);
    model = Medium(ScalarField(grid, c), 1500, a, y);
    truth = Medium(ScalarField(grid, t), 1500, a, y);
    source = SourceSpectrum({2 * pi * 0.3e6, 2 * pi * 0.35e6, 2 * pi * 0.4e6}, {cplx(1, 0), cplx(0.8, 0.3), cplx(0.5, -0.4)});
    link.step = grid.spacing;
  }

  double omega_center() const { return source.frequencies[1]; }
  LinkedRaySet linked(const Medium& m) const { return link_all(RayModel::make(m, omega_center(), 7), ring, link); }
  SpectraSet measured() const { return forward_model(truth, ring, source, linked(truth)); }
};

Eigen::VectorXd random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = N(rng);
  return v;
}

SpectraPerturbation random_perturbation(const Linearization& lin, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  SpectraPerturbation p(lin.omegas.size());
  for (auto& m : p) {
    m.resize(static_cast<Eigen::Index>(lin.n_receivers()), static_cast<Eigen::Index>(lin.n_emitters()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = cplx(N(rng), N(rng));
  }
  return p;
}

SpectraSet filled(const SpectraSet& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  SpectraSet s = shape;
  for (auto& v : s.values) v = cplx(N(rng), N(rng));
  return s;
}

}  // namespace

TEST(Objective, ResidualAndDirectSum) {
  Toy toy;
  SpectraSet a(toy.source.frequencies, toy.ring);
  std::mt19937_64 rng(7);
  a = filled(a, rng);
  EXPECT_EQ(objective(residual(a, a)), 0.0);

  SpectraSet b = a;
  b.at(1, 3, 2) += cplx(1, 0);
  EXPECT_NEAR(objective(residual(b, a)), 0.5, 1e-15);

  const SpectraSet c = filled(a, rng);
  const SpectraSet res = residual(c, a);
  double direct = 0;
  for (std::size_t i = 0; i < c.values.size(); ++i) direct += std::norm(c.values[i] - a.values[i]);
  EXPECT_NEAR(objective(res), 0.5 * direct, 1e-12 * direct);

  SpectraSet twice = res;
  for (auto& v : twice.values) v *= 2.0;
  EXPECT_NEAR(objective(twice), 4 * objective(res), 1e-12 * objective(res));
  EXPECT_NEAR(objective(res.slice(0, 1)) + objective(res.slice(1, 3)), objective(res), 1e-12 * objective(res));

  // Absent pairs drop out of both the residual and the objective.
  SpectraSet gap = c;
  gap.present[gap.pair(4, 1)] = 0;
  const SpectraSet rg = residual(gap, a);
  EXPECT_FALSE(rg.is_present(4, 1));
  EXPECT_EQ(rg.at(0, 4, 1), cplx(0, 0));

  SpectraSet other(std::vector<double>{1.0}, toy.ring);
  EXPECT_THROW(residual(a, other), ConfigError);
}

TEST(ScatteringPotential, RealExactlyWhenLossless) {
  Toy lossless;
  const cplx u = scattering_potential(lossless.model, {0.001, 0.002}, 2 * pi * 1e6);
  EXPECT_EQ(u.imag(), 0.0);
  const double c = lossless.model.sound_speed().eval({0.001, 0.002});
  const double w = 2 * pi * 1e6;
  EXPECT_NEAR(u.real(), -2 * w * w / (c * c * c), 1e-12 * std::abs(u.real()));
  Toy lossy(1.5, 0.6);
  EXPECT_LT(scattering_potential(lossy.model, {0.001, 0.002}, w).imag(), 0.0);
}

TEST(Frechet, ZeroAndLinearity) {
  Toy toy;
  const Linearization lin = linearize(toy.model, toy.ring, toy.linked(toy.model), toy.source);
  const auto zero = frechet_apply(lin, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lin.n_nodes())));
  for (const auto& m : zero) EXPECT_EQ(m.norm(), 0.0);
  std::mt19937_64 rng(3);
  const Eigen::VectorXd dc = random_vector(lin.n_nodes(), rng);
  const auto a = frechet_apply(lin, dc);
  const auto b = frechet_apply(lin, 2.0 * dc);
  for (std::size_t f = 0; f < a.size(); ++f) EXPECT_EQ((b[f] - 2.0 * a[f]).norm(), 0.0);
  const auto adj0 = frechet_adjoint_apply(lin, random_perturbation(lin, rng));
  EXPECT_TRUE(adj0.allFinite());
  SpectraPerturbation z(lin.omegas.size());
  for (auto& m : z) m = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(lin.n_receivers()), static_cast<Eigen::Index>(lin.n_emitters()));
  EXPECT_EQ(frechet_adjoint_apply(lin, z).norm(), 0.0);
}

TEST(Frechet, AdjointIdentity) {
  Toy toy(1.5, 0.5);
  const Linearization lin = linearize(toy.model, toy.ring, toy.linked(toy.model), toy.source);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd dc = random_vector(lin.n_nodes(), rng);
    const SpectraPerturbation dP = random_perturbation(lin, rng);
    const double lhs = inner(frechet_apply(lin, dc), dP);
    const double rhs = dc.dot(frechet_adjoint_apply(lin, dP));
    EXPECT_LT(std::abs(lhs - rhs), 1e-10 * std::abs(lhs)) << lhs << " " << rhs;
  }
}

TEST(Frechet, DirectionalDerivativeOfForwardModel) {
  // |P(c + h dc) - P(c) - h F dc| / h should vanish linearly in h.
  Toy toy;
  const LinkedRaySet L = toy.linked(toy.model);
  const Linearization lin = linearize(toy.model, toy.ring, L, toy.source);
  Eigen::VectorXd dc(static_cast<Eigen::Index>(lin.n_nodes()));
  for (std::size_t q = 0; q < lin.n_nodes(); ++q) {
    const Vec2 d = toy.grid.node(lin.mask.nodes[q]) - Vec2{-0.003, 0.002};
    dc(static_cast<Eigen::Index>(q)) = std::exp(-dot(d, d) / (2 * 0.003 * 0.003));
  }
  const SpectraSet P0 = forward_model(toy.model, toy.ring, toy.source, L);
  const SpectraPerturbation dP = frechet_apply(lin, dc);
  std::vector<double> hs, rem;
  for (double h : {10.0, 1.0, 0.1}) {
    std::vector<double> c(toy.model.sound_speed().coefficients().begin(), toy.model.sound_speed().coefficients().end());
    for (std::size_t q = 0; q < lin.n_nodes(); ++q) c[lin.mask.nodes[q]] += h * dc(static_cast<Eigen::Index>(q));
    const Medium mp = toy.model.with_sound_speed(ScalarField(toy.grid, c));
    const SpectraSet P1 = forward_model(mp, toy.ring, toy.source, toy.linked(mp));
    double num = 0;
    for (std::size_t f = 0; f < P1.n_frequencies(); ++f)
      for (std::size_t r = 0; r < P1.n_receivers; ++r)
        for (std::size_t e = 0; e < P1.n_emitters; ++e)
          num += std::norm(P1.at(f, r, e) - P0.at(f, r, e) - h * dP[f](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e)));
    hs.push_back(h);
    rem.push_back(std::sqrt(num) / h);
  }
  EXPECT_NEAR(oracle::loglog_slope(hs, rem), 1.0, 0.2) << rem[0] << " " << rem[2];
}

TEST(Gradient, MatchesCentralDifferencesOfObjective) {
  Toy toy;
  toy.link.tolerance = 1e-13;
  const SpectraSet meas = toy.measured();
  const LinkedRaySet L = toy.linked(toy.model);
  const Linearization lin = linearize(toy.model, toy.ring, L, toy.source);
  const SpectraSet res = residual(forward_model(toy.model, toy.ring, toy.source, L), meas);
  const Eigen::VectorXd grad = frechet_adjoint_apply(lin, as_perturbation(res));
  Eigen::VectorXd dc(static_cast<Eigen::Index>(lin.n_nodes()));
  for (std::size_t q = 0; q < lin.n_nodes(); ++q) {
    const Vec2 d = toy.grid.node(lin.mask.nodes[q]) - Vec2{-0.003, 0.002};
    dc(static_cast<Eigen::Index>(q)) = std::exp(-dot(d, d) / (2 * 0.003 * 0.003));
  }
  const auto& coeffs = toy.model.sound_speed().coefficients();
  double cnorm = 0;
  for (double v : coeffs) cnorm += v * v;
  const double h = 1e-6 * std::sqrt(cnorm) / dc.norm();
  auto F = [&](double s) {
    std::vector<double> c(coeffs.begin(), coeffs.end());
    for (std::size_t q = 0; q < lin.n_nodes(); ++q) c[lin.mask.nodes[q]] += s * h * dc(static_cast<Eigen::Index>(q));
    const Medium mp = toy.model.with_sound_speed(ScalarField(toy.grid, c));
    return objective(residual(forward_model(mp, toy.ring, toy.source, toy.linked(mp)), meas));
  };
  const double fd = (F(1) - F(-1)) / (2 * h);
  const double an = grad.dot(dc);
  EXPECT_LT(std::abs(an - fd), 1e-3 * std::abs(fd)) << an << " " << fd;
}

TEST(Gradient, PointScattererPeaksOnTravelTimeEllipse) {
  // Homogeneous model; residual of a single pair and frequency. The gradient is
  // largest where |x - x_e| + |x_r - x| is close to |x_r - x_e| (first Fresnel zone).
  Toy toy;
  const Medium water = Medium::homogeneous(toy.grid, 1500);
  const Linearization lin = linearize(water, toy.ring, toy.linked(water), toy.source);
  SpectraPerturbation dP(lin.omegas.size());
  for (auto& m : dP) m = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(lin.n_receivers()), static_cast<Eigen::Index>(lin.n_emitters()));
  const std::size_t e = 0, r = 8;
  const Vec2 xe = toy.ring.emitters[e], xr = toy.ring.receivers[r];
  for (std::size_t f = 0; f < dP.size(); ++f)
    dP[f](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e)) =
        greens_homogeneous_2d(lin.omegas[f], xr, xe, 1500) * lin.source[f];
  const Eigen::VectorXd g = frechet_adjoint_apply(lin, dP);
  Eigen::Index best = 0;
  g.cwiseAbs().maxCoeff(&best);
  const Vec2 x = toy.grid.node(lin.mask.nodes[static_cast<std::size_t>(best)]);
  const double excess = distance(x, xe) + distance(xr, x) - distance(xr, xe);
  const double lambda = 1500 / (lin.omegas.back() / (2 * pi));
  EXPECT_LT(excess, lambda / 2);
}

TEST(Hessian, SymmetricAndPositiveSemidefinite) {
  Toy toy(1.5, 0.5);
  const Linearization lin = linearize(toy.model, toy.ring, toy.linked(toy.model), toy.source);
  std::mt19937_64 rng(5);
  const Eigen::VectorXd u = random_vector(lin.n_nodes(), rng), v = random_vector(lin.n_nodes(), rng);
  const double a = u.dot(hessian_apply(lin, v)), b = v.dot(hessian_apply(lin, u));
  EXPECT_LT(std::abs(a - b), 1e-9 * std::abs(a));
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd d = random_vector(lin.n_nodes(), rng);
    EXPECT_GE(d.dot(hessian_apply(lin, d)), -1e-12 * d.squaredNorm());
  }
  EXPECT_EQ(hessian_apply(lin, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lin.n_nodes()))).norm(), 0.0);
}

TEST(ConjugateGradient, ZeroGradient) {
  const auto cg = cg_subproblem(Eigen::VectorXd::Zero(5), [](const Eigen::VectorXd& v) -> Eigen::VectorXd { return v; }, 10);
  EXPECT_EQ(cg.iterations, 0u);
  EXPECT_EQ(cg.dc.norm(), 0.0);
}

TEST(ConjugateGradient, DiagonalQuadraticExact) {
  Eigen::VectorXd diag(6), g(6);
  diag << 1, 2, 2, 5, 5, 9;  // rank of distinct eigenvalues: 4
  g << 0.3, -1.0, 0.2, 4.0, -2.0, 1.5;
  const auto H = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return diag.cwiseProduct(v); };
  const auto cg = cg_subproblem(g, H, 10);
  const Eigen::VectorXd exact = -g.cwiseQuotient(diag);
  EXPECT_LE(cg.iterations, 5u);
  EXPECT_LT((cg.dc - exact).norm(), 1e-10 * exact.norm());
}

TEST(ConjugateGradient, LostCurvatureTruncates) {
  Eigen::VectorXd diag(3), g(3);
  diag << 1, -1, 2;
  g << 0, 1, 0;
  const auto cg = cg_subproblem(g, [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return diag.cwiseProduct(v); }, 10);
  EXPECT_TRUE(cg.curvature_lost);
  EXPECT_EQ(cg.dc.norm(), 0.0);
}

TEST(ConjugateGradient, NormalEquationResidualNonIncreasing) {
  Toy toy;
  const SpectraSet meas = toy.measured();
  const LinkedRaySet L = toy.linked(toy.model);
  const Linearization lin = linearize(toy.model, toy.ring, L, toy.source);
  const SpectraSet res = residual(forward_model(toy.model, toy.ring, toy.source, L), meas);
  const CgResult cg = cg_subproblem(lin, frechet_adjoint_apply(lin, as_perturbation(res)), 10);
  ASSERT_GE(cg.residual_norms.size(), 2u);
  for (std::size_t l = 1; l < cg.residual_norms.size(); ++l)
    EXPECT_LE(cg.residual_norms[l], cg.residual_norms[l - 1] * (1 + 1e-12)) << l;
}

TEST(RelativeError, Definitions) {
  Toy toy;
  std::vector<std::size_t> nodes(toy.grid.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = i;
  EXPECT_EQ(relative_error(toy.truth, toy.truth, nodes), 0.0);
  EXPECT_NEAR(relative_error(Medium::homogeneous(toy.grid, 1500), toy.truth, nodes), 100.0, 1e-12);
  std::vector<double> mid(toy.grid.size());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (1500 + toy.truth.sound_speed().coefficients()[i]);
  EXPECT_NEAR(relative_error(toy.truth.with_sound_speed(ScalarField(toy.grid, mid)), toy.truth, nodes), 50.0, 1e-9);
  EXPECT_THROW(relative_error(toy.truth, Medium::homogeneous(toy.grid, 1500), nodes), DomainError);
}

TEST(Schedule, BatchesAndOrder) {
  const auto s = FrequencySchedule::linspace_hz(0.2e6, 1.5e6, 140, 4);
  EXPECT_EQ(s.n_batches(), 35u);
  EXPECT_NEAR(s.frequencies.front(), 2 * pi * 0.2e6, 1e-6);
  EXPECT_NEAR(s.frequencies.back(), 2 * pi * 1.5e6, 1e-6);
  EXPECT_EQ(s.batch(0), (std::pair<std::size_t, std::size_t>{0, 4}));
  FrequencySchedule r = s;
  r.descending = true;
  EXPECT_EQ(r.batch(0), (std::pair<std::size_t, std::size_t>{136, 140}));
  EXPECT_THROW(FrequencySchedule({1.0, 1.0}, 1), ConfigError);
  EXPECT_THROW(FrequencySchedule({1.0}, 0), ConfigError);
  const auto odd = FrequencySchedule::linspace_hz(1e5, 2e5, 5, 2);
  EXPECT_EQ(odd.n_batches(), 3u);
  EXPECT_EQ(odd.batch(2), (std::pair<std::size_t, std::size_t>{4, 5}));
}

TEST(Invert, SelfGeneratedDataGivesZeroUpdate) {
  Toy toy;
  const SpectraSet meas = forward_model(toy.model, toy.ring, toy.source, toy.linked(toy.model));
  InversionConfig cfg;
  cfg.link = toy.link;
  cfg.truth = toy.truth;
  const FrequencySchedule sched(toy.source.frequencies, 3);
  const InversionResult out = invert(meas, toy.model, toy.source, sched, cfg);
  ASSERT_EQ(out.history.size(), 1u);
  // Zero up to roundoff in the batch centre frequency used for linking.
  double energy = 0;
  for (auto v : meas.values) energy += std::norm(v);
  EXPECT_LT(out.history[0].objective_before, 1e-20 * energy);
  const auto& before = toy.model.sound_speed().coefficients();
  const auto& after = out.model.sound_speed().coefficients();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i], before[i], 1e-6);
  EXPECT_NEAR(out.history[0].relative_error,
              relative_error(toy.model, toy.truth, NodeMask::inside_ring(toy.grid, toy.ring).nodes), 1e-8);
}

TEST(Invert, GaussNewtonDescendsOnNoiselessData) {
  Toy toy;
  const SourceSpectrum src({2 * pi * 0.25e6, 2 * pi * 0.3e6, 2 * pi * 0.35e6, 2 * pi * 0.4e6},
                           {cplx(1, 0), cplx(1, 0), cplx(1, 0), cplx(1, 0)});
  const SpectraSet meas = forward_model(toy.truth, toy.ring, src, link_all(RayModel::make(toy.truth, src.frequencies[1], 7), toy.ring, toy.link));
  InversionConfig cfg;
  cfg.link = toy.link;
  cfg.truth = toy.truth;
  const FrequencySchedule sched(src.frequencies, 2);
  const InversionResult out = invert(meas, toy.model, src, sched, cfg);
  ASSERT_EQ(out.history.size(), 2u);
  const double re0 = relative_error(toy.model, toy.truth, NodeMask::inside_ring(toy.grid, toy.ring).nodes);
  for (const auto& b : out.history) {
    EXPECT_LE(b.objective_after, b.objective_before);
    EXPECT_FALSE(b.objective_increased);
  }
  EXPECT_LT(out.history.back().relative_error, re0);
}

TEST(Invert, RejectsMismatchedInputs) {
  Toy toy;
  const SpectraSet meas = toy.measured();
  InversionConfig cfg;
  cfg.link = toy.link;
  EXPECT_THROW(invert(meas, toy.model, toy.source.subset(0, 2), FrequencySchedule(toy.source.frequencies, 1), cfg),
               ConfigError);
  EXPECT_THROW(invert(meas, toy.model, toy.source, FrequencySchedule({toy.source.frequencies[0], toy.source.frequencies[2]}, 1), cfg),
               ConfigError);
}
