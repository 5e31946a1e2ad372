#include <cmath>

#include "doctest.h"
#include "mpcal/error.hpp"
#include "mpcal/microplane.hpp"
#include "mpcal/random.hpp"

using namespace mpcal;
using namespace mpcal::microplane;

namespace {

ParameterVector reference(double nu = 0.18) {
  ParameterVector p = Bounds().midpoint();
  p[Param::nu] = nu;
  return p;
}

MacroTensor random_tensor(Rng& rng, double scale) {
  return {rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale),
          rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
}

double max_abs(const MacroTensor& t) {
  double m = 0.0;
  for (double c : t.components()) m = std::max(m, std::abs(c));
  return m;
}

// sigma_ij = E / (1 + nu) (eps_ij + nu / (1 - 2 nu) tr(eps) delta_ij)
MacroTensor hooke(const MacroTensor& e, double E, double nu) {
  const double a = E / (1.0 + nu);
  const double b = a * nu / (1.0 - 2.0 * nu) * e.trace();
  const auto& c = e.components();
  return {a * c[0] + b, a * c[1] + b, a * c[2] + b, a * c[3], a * c[4], a * c[5]};
}

// Axis permutation (x, y, z) -> (y, z, x) applied to a symmetric tensor.
MacroTensor rotate_axes(const MacroTensor& t) {
  MacroTensor r;
  const std::size_t perm[3] = {1, 2, 0};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i; j < 3; ++j) r(perm[i], perm[j]) = t(i, j);
  }
  return r;
}

}  // namespace

TEST_CASE("quadrature moments") {
  const MicroplaneSystem& sys = build_integration_scheme();
  double w = 0.0;
  double m2[3][3] = {};
  double m4[3][3][3][3] = {};
  for (const Plane& p : sys.planes) {
    CHECK(p.n[2] > 0.0);
    CHECK(p.weight > 0.0);
    w += p.weight;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        m2[i][j] += p.weight * p.n[i] * p.n[j];
        for (int k = 0; k < 3; ++k)
          for (int l = 0; l < 3; ++l) m4[i][j][k][l] += p.weight * p.n[i] * p.n[j] * p.n[k] * p.n[l];
      }
  }
  CHECK(std::abs(w - 1.0) < 1e-12);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(std::abs(m2[i][j] - (i == j ? 1.0 / 3.0 : 0.0)) < 1e-12);
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) {
          const double d = (i == j) * (k == l) + (i == k) * (j == l) + (i == l) * (j == k);
          CHECK(std::abs(m4[i][j][k][l] - d / 15.0) < 1e-10);
        }
    }
}

TEST_CASE("plane frames are orthonormal") {
  for (const Plane& p : build_integration_scheme().planes) {
    auto dot = [](const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; };
    CHECK(dot(p.n, p.n) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(dot(p.l, p.l) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(dot(p.m, p.m) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(dot(p.n, p.l)) < 1e-14);
    CHECK(std::abs(dot(p.n, p.m)) < 1e-14);
    CHECK(std::abs(dot(p.l, p.m)) < 1e-14);
  }
}

TEST_CASE("strain projection splits the normal strain") {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const MacroTensor e = random_tensor(rng, 1e-3);
    for (const Plane& p : build_integration_scheme().planes) {
      const PlaneStrains s = project_strain(e, p);
      // equal up to the rounding of one subtraction
      CHECK(std::abs(s.epsN - (s.epsV + s.epsD)) <= 4e-16 * std::max(std::abs(s.epsN), std::abs(s.epsV)));
    }
  }
}

TEST_CASE("elastic response is isotropic Hooke") {
  Rng rng(11);
  for (double nu : {0.10, 0.18, 0.24}) {
    const ParameterVector p = reference(nu);
    for (int i = 0; i < 20; ++i) {
      const MacroTensor e = random_tensor(rng, 1e-6);
      const StepResult r = evaluate_step(e, p, {});
      CHECK_FALSE(r.state.any_boundary_active);
      const MacroTensor want = hooke(e, p.E(), nu);
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(std::abs(r.sigma.components()[c] - want.components()[c]) <= 0.005 * max_abs(want));
      }
    }
  }
}

TEST_CASE("joint homogeneity in strain and k1") {
  Rng rng(5);
  const ParameterVector p = reference();
  for (int i = 0; i < 100; ++i) {
    const MacroTensor e = random_tensor(rng, 20.0 * p.k1());
    const MacroTensor s = evaluate_step(e, p, {}).sigma;
    for (double lambda : {0.5, 2.0, 10.0}) {
      ParameterVector q = p;
      q[Param::k1] = lambda * p.k1();
      const MacroTensor sl = evaluate_step(e * lambda, q, {}).sigma;
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(std::abs(sl.components()[c] - lambda * s.components()[c]) <= 1e-8 * lambda * max_abs(s));
      }
    }
  }
}

TEST_CASE("evaluation is pure") {
  Rng rng(9);
  const ParameterVector p = reference();
  CHECK(max_abs(evaluate_step({}, p, {}).sigma) == 0.0);
  const MacroTensor e = random_tensor(rng, 1e-3);
  const StepResult a = evaluate_step(e, p, {});
  const StepResult b = evaluate_step(e, p, {});
  CHECK(a.sigma == b.sigma);
}

TEST_CASE("axis permutations commute with the response") {
  Rng rng(21);
  const ParameterVector p = reference();
  for (int i = 0; i < 30; ++i) {
    const MacroTensor e = random_tensor(rng, 10.0 * p.k1());
    const MacroTensor a = rotate_axes(evaluate_step(e, p, {}).sigma);
    const MacroTensor b = evaluate_step(rotate_axes(e), p, {}).sigma;
    for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(a.components()[c] - b.components()[c]) <= 1e-9 * max_abs(a));
  }
}

TEST_CASE("plane stresses respect the boundaries") {
  Rng rng(13);
  const ParameterVector p = reference();
  const double tol = 1e-9 * p.E() * p.k1();
  for (int i = 0; i < 2000; ++i) {
    PlaneStrains s;
    s.epsV = rng.uniform(-0.02, 0.002);
    s.epsD = rng.uniform(-0.01, 0.005);
    s.epsN = s.epsV + s.epsD;
    s.epsL = rng.uniform(-0.005, 0.005);
    s.epsM = rng.uniform(-0.005, 0.005);
    PlaneHistory h;
    if (rng.bernoulli(0.5)) {
      h.eps_v_min = rng.uniform(-0.02, 0.0);
      h.sig_v_min = boundary::volumetric_compression(h.eps_v_min, p);
    }
    const PlaneStresses st = microplane_law(s, p, h).stress;
    CHECK(st.sigV >= boundary::volumetric_compression(s.epsV, p) - tol);
    CHECK(st.sigD >= boundary::deviatoric_compression(s.epsD, p) - tol);
    CHECK(st.sigN() <= boundary::tensile_normal(s.epsN, p) + tol);
    CHECK(std::hypot(st.sigL, st.sigM) <= boundary::shear(st.sigN(), std::hypot(s.epsL, s.epsM), p) + tol);
  }
}

TEST_CASE("compaction record only decreases") {
  const ParameterVector p = reference();
  MaterialState state;
  std::array<double, kNumPlanes> prev{};
  for (int i = 1; i <= 60; ++i) {
    const double eps = (i <= 40 ? i : 80 - i) * 2e-4;
    state = evaluate_step(MacroTensor::isotropic(-eps), p, state).state;
    for (std::size_t k = 0; k < kNumPlanes; ++k) {
      CHECK(state.planes[k].eps_v_min <= prev[k]);
      prev[k] = state.planes[k].eps_v_min;
    }
  }
}

TEST_CASE("boundary curves") {
  const ParameterVector p = reference();
  const double Ek1 = p.E() * p.k1();
  CHECK(boundary::tensile_normal(0.0, p) == doctest::Approx(1.5 * Ek1));
  CHECK(boundary::tensile_normal(1.5 * p.k1() + 5.0 * p.k1(), p) == doctest::Approx(1.5 * Ek1 * std::exp(-1.0)));
  CHECK(boundary::deviatoric_compression(-8.0 * p.k1(), p) == doctest::Approx(-8.0 * Ek1));
  const double w = 20.0 * p.c20() * p.k1();
  CHECK(boundary::deviatoric_compression(-8.0 * p.k1() - w, p) == doctest::Approx(-4.0 * Ek1));
  CHECK(boundary::volumetric_compression(0.0, p) == doctest::Approx(-Ek1 * p.k3()));
  CHECK(boundary::volumetric_compression(-p.k1() * p.k4(), p) == doctest::Approx(-Ek1 * p.k3() * std::exp(1.0)));
}

TEST_CASE("law rejects nu at the tangential limit") {
  ParameterVector p = reference();
  p[Param::nu] = 0.25;
  CHECK_THROWS_AS(microplane_law({}, p, {}), DataError);
}
