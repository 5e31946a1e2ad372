#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mpcal/error.hpp"
#include "mpcal/lab.hpp"
#include "mpcal/microplane.hpp"
#include "mpcal/random.hpp"
#include "mpcal/sensa.hpp"

using namespace mpcal;
using namespace mpcal::lab;

namespace {

ParameterVector midpoint() {
  ParameterVector p = Bounds().midpoint();
  p[Param::nu] = 0.2;
  return p;
}

ParameterVector random_vector(Rng& rng) {
  const Bounds b = sensa::screening_bounds(Bounds());
  ParameterVector p;
  for (Param q : kAllParams) p[q] = rng.uniform(b[q].lo, b[q].hi);
  p[Param::nu] = 0.2;
  return p;
}

ResponseCurve from_points(std::vector<CurvePoint> pts, TestKind kind = TestKind::Uniaxial) {
  ResponseCurve c;
  c.kind = kind;
  c.points = std::move(pts);
  return c;
}

double load_max_strain(const ResponseCurve& c) {
  double m = 0.0;
  for (const CurvePoint& p : c.branch(Branch::Load)) m = std::max(m, p.strain);
  return m;
}

}  // namespace

TEST_CASE("uniaxial elastic regime follows E eps") {
  const ParameterVector p = midpoint();
  UniaxialProtocol proto;
  proto.eps_max = 1e-5;
  proto.n_steps = 20;
  const ResponseCurve c = run_uniaxial(p, proto);
  c.check_invariants();
  CHECK(c.points.size() == 21);
  for (const CurvePoint& pt : c.points) CHECK(std::abs(pt.stress - p.E() * pt.strain) <= 0.005 * p.E() * pt.strain + 1e-12);
}

TEST_CASE("uniaxial midpoint curve has an interior peak") {
  const ResponseCurve c = run_uniaxial(midpoint());
  const Peak pk = find_peak(c);
  CHECK(pk.strain > c.points.front().strain);
  CHECK(pk.strain < c.points.back().strain);
  CHECK(c.points.back().stress < pk.stress);
}

TEST_CASE("uniaxial peak is stable under step refinement") {
  UniaxialProtocol fine;
  fine.n_steps = 2 * UniaxialProtocol{}.n_steps;
  const double a = find_peak(run_uniaxial(midpoint())).stress;
  const double b = find_peak(run_uniaxial(midpoint(), fine)).stress;
  CHECK(std::abs(a - b) < 0.01 * a);
}

TEST_CASE("hydrostatic elastic slope is the bulk stiffness") {
  const ParameterVector p = midpoint();
  HydrostaticProtocol proto;
  proto.peak_pressure.reset();
  proto.eps_max = 1e-6;
  proto.n_steps = 20;
  proto.unload = false;
  const ResponseCurve c = run_hydrostatic(p, proto);
  const double slope = p.E() / (1.0 - 2.0 * p.nu());
  for (const CurvePoint& pt : c.points) {
    CHECK(pt.branch == Branch::Load);
    CHECK(std::abs(pt.stress - slope * pt.strain) <= 1e-9 * slope * proto.eps_max);
  }
}

TEST_CASE("hydrostatic pressure ordered in k3") {
  HydrostaticProtocol proto;
  proto.peak_pressure.reset();
  proto.eps_max = 0.02;
  proto.unload = false;
  ParameterVector lo = midpoint();
  ParameterVector hi = midpoint();
  lo[Param::k3] = 5.0;
  hi[Param::k3] = 15.0;
  const ResponseCurve a = run_hydrostatic(lo, proto);
  const ResponseCurve b = run_hydrostatic(hi, proto);
  CHECK(b.points.back().stress > a.points.back().stress);
}

TEST_CASE("hydrostatic unload branch") {
  const ParameterVector p = midpoint();
  const HydrostaticProtocol proto;
  const ResponseCurve c = run_hydrostatic(p, proto);
  c.check_invariants();
  const auto load = c.branch(Branch::Load);
  const auto unload = c.branch(Branch::Unload);
  REQUIRE(unload.size() == static_cast<std::size_t>(proto.n_unload_steps) + 1);
  CHECK(load.back().stress == doctest::Approx(*proto.peak_pressure).epsilon(1e-6));
  // opens at the turning point
  CHECK(unload.front().strain == load.back().strain);
  CHECK(unload.front().stress == load.back().stress);
  CHECK(unload.back().stress == doctest::Approx(proto.unload_fraction * load.back().stress).epsilon(1e-6));
  const double ev = microplane::elastic_moduli(p).EV;
  for (std::size_t i = 1; i < unload.size(); ++i) {
    const double slope = (unload[i - 1].stress - unload[i].stress) / (unload[i - 1].strain - unload[i].strain);
    CHECK(slope == doctest::Approx(ev).epsilon(1e-6));
  }
  const double top = load_max_strain(c);
  for (std::size_t i = 1; i < unload.size(); ++i) CHECK(unload[i].strain < top);

  HydrostaticProtocol single = proto;
  single.unload = false;
  const ResponseCurve d = run_hydrostatic(p, single);
  CHECK(std::all_of(d.points.begin(), d.points.end(), [](const CurvePoint& q) { return q.branch == Branch::Load; }));
}

TEST_CASE("triaxial starts at the confinement") {
  const ParameterVector p = midpoint();
  for (double s : TriaxialProtocol{}.confinements) {
    TriaxialProtocol proto;
    proto.n_steps = 50;
    proto.eps_max = 0.005;
    const ResponseCurve c = run_triaxial(p, s, proto);
    c.check_invariants();
    CHECK(c.points.front().strain == 0.0);
    CHECK(c.points.front().stress == doctest::Approx(s).epsilon(1e-6));
    CHECK(c.confinement == s);
  }
  CHECK_THROWS_AS(run_triaxial(p, -1.0), ConfigError);
}

TEST_CASE("confined strength ordered in k2") {
  ParameterVector lo = midpoint();
  ParameterVector hi = midpoint();
  lo[Param::k2] = 100.0;
  hi[Param::k2] = 1000.0;
  const ResponseCurve a = run_triaxial(lo, 34.5);
  const ResponseCurve b = run_triaxial(hi, 34.5);
  const FeatureSpec f = FeatureSpec::stress_at_strain(0.0128);
  CHECK(extract_feature(b, f) > extract_feature(a, f));
}

TEST_CASE("drivers are reproducible") {
  const ParameterVector p = midpoint();
  CHECK(run_uniaxial(p).points == run_uniaxial(p).points);
  CHECK(run_hydrostatic(p).points == run_hydrostatic(p).points);
  CHECK(run_triaxial(p, 68.9).points == run_triaxial(p, 68.9).points);
}

TEST_CASE("drivers reject nu at the driver limit") {
  ParameterVector p = midpoint();
  p[Param::nu] = 0.245;
  CHECK_THROWS_AS(run_uniaxial(p), DataError);
}

TEST_CASE("features are stable under step refinement") {
  Rng rng(17);
  const std::vector<FeatureSpec> uni = {FeatureSpec::stress_at_strain(0.0005), FeatureSpec::stress_at_strain(0.0025),
                                        FeatureSpec::peak_stress()};
  const std::vector<FeatureSpec> hyd = {FeatureSpec::strain_at_stress(137.0, Branch::Load),
                                        FeatureSpec::strain_at_stress(308.0, Branch::Load),
                                        FeatureSpec::strain_at_stress(85.5, Branch::Unload)};
  const std::vector<FeatureSpec> tri = {FeatureSpec::stress_at_strain(0.0128), FeatureSpec::stress_at_strain(0.0308)};
  for (int i = 0; i < 5; ++i) {
    const ParameterVector p = random_vector(rng);
    Protocols coarse;
    Protocols fine;
    fine.uniaxial.n_steps *= 2;
    fine.hydrostatic.n_steps *= 2;
    fine.hydrostatic.n_unload_steps *= 2;
    fine.triaxial.n_steps *= 2;
    auto compare = [&](TestKind kind, const std::vector<FeatureSpec>& fs) {
      const ResponseCurve a = simulate(kind, p, coarse);
      const ResponseCurve b = simulate(kind, p, fine);
      for (const FeatureSpec& f : fs) {
        const double x = extract_feature(a, f);
        const double y = extract_feature(b, f);
        INFO(test_kind_name(kind), " ", f.label(), " sample ", i);
        CHECK(std::abs(x - y) < 0.01 * std::abs(y));
      }
    };
    compare(TestKind::Uniaxial, uni);
    compare(TestKind::Hydrostatic, hyd);
    compare(TestKind::Triaxial, tri);
  }
}

TEST_CASE("feature interpolation") {
  const double E = 30000.0;
  const ResponseCurve line = from_points({{0.0, 0.0, Branch::Load}, {0.0007, 0.0007 * E, Branch::Load},
                                          {0.002, 0.002 * E, Branch::Load}});
  CHECK(extract_feature(line, FeatureSpec::stress_at_strain(0.001)) == doctest::Approx(E * 0.001).epsilon(1e-14));
  CHECK(extract_feature(line, FeatureSpec::strain_at_stress(45.0, Branch::Load)) ==
        doctest::Approx(45.0 / E).epsilon(1e-14));
  CHECK_THROWS_AS(extract_feature(line, FeatureSpec::stress_at_strain(0.003)), DataError);
}

TEST_CASE("peak of a discrete curve") {
  const ResponseCurve c = from_points({{1, 1, Branch::Load}, {2, 3, Branch::Load}, {3, 2, Branch::Load}});
  const Peak p = find_peak(c);
  CHECK(p.strain == 2.0);
  CHECK(p.stress == 3.0);
  CHECK(extract_feature(c, FeatureSpec::peak_strain()) == 2.0);
  CHECK(extract_feature(c, FeatureSpec::peak_stress()) == 3.0);
  const ResponseCurve rising = from_points({{1, 1, Branch::Load}, {2, 2, Branch::Load}, {3, 3, Branch::Load}});
  CHECK_THROWS_AS(find_peak(rising), DataError);
}

TEST_CASE("strain at stress follows the branch tag") {
  const ResponseCurve c = from_points({{0.0, 0.0, Branch::Load},
                                       {0.01, 100.0, Branch::Load},
                                       {0.02, 200.0, Branch::Load},
                                       {0.02, 200.0, Branch::Unload},
                                       {0.018, 100.0, Branch::Unload},
                                       {0.016, 0.0, Branch::Unload}},
                                      TestKind::Hydrostatic);
  CHECK(extract_feature(c, FeatureSpec::strain_at_stress(50.0, Branch::Load)) == doctest::Approx(0.005));
  CHECK(extract_feature(c, FeatureSpec::strain_at_stress(50.0, Branch::Unload)) == doctest::Approx(0.017));
}

TEST_CASE("yield strain uses the chord stiffness threshold") {
  // stiffness 1000 up to 0.01, then 100
  std::vector<CurvePoint> pts;
  for (int i = 0; i <= 40; ++i) {
    const double e = 0.001 * i;
    pts.push_back({e, e <= 0.01 ? 1000.0 * e : 10.0 + 100.0 * (e - 0.01), Branch::Load});
  }
  const double y = extract_feature(from_points(pts), FeatureSpec::yield_strain());
  CHECK(y >= 0.008);
  CHECK(y <= 0.0105);
}

TEST_CASE("feature labels round-trip") {
  for (const FeatureSpec& f :
       {FeatureSpec::stress_at_strain(0.0005), FeatureSpec::strain_at_stress(85.5, Branch::Unload),
        FeatureSpec::strain_at_stress(137.0, Branch::Load), FeatureSpec::peak_strain(), FeatureSpec::peak_stress(),
        FeatureSpec::yield_strain()}) {
    CHECK(FeatureSpec::parse(f.label()) == f);
  }
  CHECK(FeatureSpec::stress_at_strain(0.0005).label() == "sigma@0.0005");
  CHECK(FeatureSpec::strain_at_stress(85.5, Branch::Unload).label() == "eps@85.5/unload");
  CHECK_THROWS_AS(FeatureSpec::parse("tau@1"), ConfigError);
}

TEST_CASE("curve invariants") {
  CHECK_THROWS_AS(from_points({{0.0, 0.0, Branch::Load}}).check_invariants(), DataError);
  CHECK_THROWS_AS(from_points({{0.0, 0.0, Branch::Load}, {0.0, 1.0, Branch::Load}}).check_invariants(), DataError);
  CHECK_NOTHROW(from_points({{0.0, 0.0, Branch::Load}, {0.1, 1.0, Branch::Load}}).check_invariants());
}
