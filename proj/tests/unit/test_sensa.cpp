#include <cmath>
#include <vector>

#include "doctest.h"
#include "mpcal/doe.hpp"
#include "mpcal/error.hpp"
#include "mpcal/random.hpp"
#include "mpcal/sensa.hpp"

using namespace mpcal;
using namespace mpcal::sensa;

namespace {

double oracle_r(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

// Curve with stress = slope * strain over the given grid.
lab::ResponseCurve linear_curve(double slope, double eps_max) {
  lab::ResponseCurve c;
  for (int i = 0; i <= 10; ++i) {
    const double e = eps_max * i / 10.0;
    c.points.push_back({e, slope * e, lab::Branch::Load});
  }
  return c;
}

}  // namespace

TEST_CASE("pearson") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(pearson(x, x).r == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(x, neg).r == doctest::Approx(-1.0).epsilon(1e-15));

  const std::vector<double> a = {1, 2, 3};
  const std::vector<double> b = {2, 4, 7};
  CHECK(pearson(a, b).r == doctest::Approx(oracle_r(a, b)).epsilon(1e-14));
  CHECK(pearson(a, b).r == doctest::Approx(5.0 / std::sqrt(2.0 * 114.0 / 9.0)).epsilon(1e-14));

  const std::vector<double> c = {2, 2, 2};
  const Correlation undefined = pearson(c, c);
  CHECK(undefined.no_signal);
  CHECK(undefined.r == 0.0);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), DataError);
  CHECK_THROWS_AS(pearson(a, x), DataError);
}

TEST_CASE("pearson under affine maps") {
  Rng rng(1);
  std::vector<double> x, y;
  for (int i = 0; i < 40; ++i) {
    x.push_back(rng.uniform());
    y.push_back(x.back() + 0.3 * rng.uniform());
  }
  const double r = pearson(x, y).r;
  CHECK(r <= 1.0);
  CHECK(r >= -1.0);
  std::vector<double> up, down;
  for (double v : y) {
    up.push_back(3.0 * v + 7.0);
    down.push_back(-2.0 * v + 1.0);
  }
  CHECK(std::abs(pearson(x, up).r - r) < 1e-12);
  CHECK(std::abs(pearson(x, down).r + r) < 1e-12);
}

TEST_CASE("profile of a single-factor response") {
  const doe::DesignSet d = doe::anneal_decorrelate(doe::lhs_sample(30, 3, 4), 5).design;
  std::vector<std::size_t> rows;
  std::vector<lab::ResponseCurve> curves;
  for (std::size_t i = 0; i < d.samples(); ++i) {
    rows.push_back(i);
    curves.push_back(linear_curve(1000.0 + 5000.0 * d(i, 0), 0.01));
  }
  const auto grid = uniform_grid(0.01, 10);
  const SensitivityProfile prof =
      sensitivity_profile(d, rows, curves, grid, Response::StressAtStrain, {"E", "k1", "c20"});
  for (std::size_t g = 0; g < grid.size(); ++g) {
    CHECK(prof.r[0][g].r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(prof.r[1][g].r) <= doe::max_abs_correlation(d) + 1e-12);
  }
  CHECK(prof.ranking().front() == 0);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (const Correlation& c : prof.r[j]) {
      CHECK(std::abs(c.r) <= 1.0);
      m = std::max(m, std::abs(c.r));
    }
    CHECK(prof.max_abs(j) == m);
  }
}

TEST_CASE("profile marks short curves") {
  const doe::DesignSet d = doe::lhs_sample(5, 1, 2);
  std::vector<std::size_t> rows = {0, 1, 2, 3, 4};
  std::vector<lab::ResponseCurve> curves;
  for (std::size_t i = 0; i < 5; ++i) curves.push_back(linear_curve(1.0 + d(i, 0), i < 3 ? 0.005 : 0.01));
  const std::vector<double> grid = {0.004, 0.008};
  const auto prof = sensitivity_profile(d, rows, curves, grid, Response::StressAtStrain, {"E"});
  CHECK(prof.coverage[0] == 5);
  CHECK(prof.coverage[1] == 2);
  CHECK_FALSE(prof.r[0][0].no_signal);
  CHECK(prof.r[0][1].no_signal);
  CHECK_THROWS_AS(sensitivity_profile(d, std::vector<std::size_t>{0, 1}, std::span(curves.data(), 2), grid,
                                      Response::StressAtStrain, {"E"}),
                  DataError);
}

TEST_CASE("peak table") {
  const doe::DesignSet d = doe::lhs_sample(20, 2, 6);
  std::vector<std::size_t> rows;
  std::vector<lab::Peak> peaks;
  for (std::size_t i = 0; i < d.samples(); ++i) {
    rows.push_back(i);
    peaks.push_back({0.002 + 0.001 * d(i, 0) * d(i, 0), 30.0 * d(i, 1)});
  }
  const PeakTable t = peak_sensitivity(d, rows, peaks);
  CHECK(t.stress[1].r == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.strain[0].r > 0.9);

  std::vector<std::size_t> rev_rows(rows.rbegin(), rows.rend());
  std::vector<lab::Peak> rev_peaks(peaks.rbegin(), peaks.rend());
  const PeakTable u = peak_sensitivity(d, rev_rows, rev_peaks);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(u.strain[j].r == doctest::Approx(t.strain[j].r).epsilon(1e-12));
    CHECK(u.stress[j].r == doctest::Approx(t.stress[j].r).epsilon(1e-12));
  }
}

TEST_CASE("screening bounds and grids") {
  const Bounds b = screening_bounds(Bounds());
  CHECK(b[Param::nu].hi == kScreeningNuMax);
  CHECK(b[Param::E] == Bounds()[Param::E]);
  const auto g = uniform_grid(0.01, 100);
  CHECK(g.size() == 100);
  CHECK(g.front() == doctest::Approx(1e-4));
  CHECK(g.back() == doctest::Approx(0.01));
  lab::Protocols pr;
  CHECK(profile_grid(lab::TestKind::Hydrostatic, pr).back() == doctest::Approx(*pr.hydrostatic.peak_pressure));
  pr.hydrostatic.peak_pressure.reset();
  CHECK_THROWS_AS(profile_grid(lab::TestKind::Hydrostatic, pr), ConfigError);
  CHECK(response_for(lab::TestKind::Hydrostatic) == Response::StrainAtStress);
  CHECK(response_for(lab::TestKind::Triaxial) == Response::StressAtStrain);
}
