#include "mpcal/lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "mpcal/error.hpp"

namespace mpcal::lab {
namespace {

using microplane::MacroTensor;
using microplane::MaterialState;
using microplane::StepResult;

void check_driver_params(const ParameterVector& p) {
  if (!p.is_physical()) throw DataError("driver: parameters are not physically admissible");
  if (p.nu() >= kMaxDriverNu) {
    std::ostringstream os;
    os << "driver: nu = " << p.nu() << " not supported (requires nu < " << kMaxDriverNu << ")";
    throw DataError(os.str());
  }
}

// Axial strain (x direction) with equal lateral strains (y, z).
StepResult evaluate_axisymmetric(double axial, double lateral, const ParameterVector& p,
                                 const MaterialState& state) {
  return microplane::evaluate_step(MacroTensor::diagonal(axial, lateral, lateral), p, state);
}

struct LateralSolution {
  double lateral;
  StepResult result;
};

// Finds the lateral strain with sigma_yy = target at fixed axial strain.
// Bracket by expanding steps from the guess, then Illinois false position
// (secant halving the stale end on repeated sides).
LateralSolution solve_lateral(double axial, double target, double guess, double step0, double tol,
                              int max_iter, const ParameterVector& p, const MaterialState& state) {
  int iter = 0;
  auto residual = [&](double x, StepResult& out) {
    ++iter;
    out = evaluate_axisymmetric(axial, x, p, state);
    return out.sigma(1, 1) - target;
  };
  auto fail = [&](const char* why) {
    std::ostringstream os;
    os << "lateral equilibrium failed at axial strain " << std::abs(axial) << " (" << why << ")";
    return ConvergenceError(os.str());
  };

  StepResult ra, rb;
  double a = guess;
  double fa = residual(a, ra);
  if (std::abs(fa) <= tol) return {a, ra};

  // Residual grows with lateral expansion in the admissible regime.
  const double dir = fa < 0.0 ? 1.0 : -1.0;
  double step = step0;
  double b = a + dir * step;
  double fb = residual(b, rb);
  while ((fa < 0.0) == (fb < 0.0)) {
    if (std::abs(fb) <= tol) return {b, rb};
    if (iter >= max_iter) throw fail("no bracket");
    a = b;
    fa = fb;
    ra = rb;
    step *= 2.0;
    b = a + dir * step;
    fb = residual(b, rb);
  }
  if (std::abs(fb) <= tol) return {b, rb};

  int side = 0;
  StepResult rc;
  while (iter < max_iter) {
    double c = (a * fb - b * fa) / (fb - fa);
    if (!(c > std::min(a, b) && c < std::max(a, b))) c = 0.5 * (a + b);
    const double fc = residual(c, rc);
    if (std::abs(fc) <= tol) return {c, rc};
    if ((fc < 0.0) == (fb < 0.0)) {
      b = c;
      fb = fc;
      if (side == -1) fa *= 0.5;
      side = -1;
    } else {
      a = c;
      fa = fc;
      if (side == 1) fb *= 0.5;
      side = 1;
    }
    if (std::abs(b - a) <= 1e-15 * std::max(1.0, std::abs(a))) return {c, rc};
  }
  throw fail("iteration cap reached");
}

double hydro_pressure(double eps, const ParameterVector& p) {
  return -evaluate_axisymmetric(-eps, -eps, p, MaterialState{}).sigma(0, 0);
}

// Smallest hydrostatic compaction strain whose pressure equals target.
// Pressure is non-decreasing in compaction under monotone loading.
double find_hydro_strain(double target, double eps_limit, const ParameterVector& p) {
  if (hydro_pressure(eps_limit, p) < target) {
    std::ostringstream os;
    os << "pressure " << target << " MPa not reached within strain " << eps_limit;
    throw DataError(os.str());
  }
  double lo = 0.0;
  double hi = eps_limit;
  for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (hydro_pressure(mid, p) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

void check_steps(int n_steps, double eps_max) {
  if (n_steps < 20) throw ConfigError("protocol needs n_steps >= 20");
  if (!(eps_max > 0.0)) throw ConfigError("protocol needs eps_max > 0");
}

}  // namespace

std::string_view test_kind_name(TestKind k) {
  switch (k) {
    case TestKind::Uniaxial: return "uniaxial";
    case TestKind::Hydrostatic: return "hydrostatic";
    case TestKind::Triaxial: return "triaxial";
  }
  return "?";
}

TestKind test_kind_from_name(std::string_view name) {
  if (name == "uniaxial") return TestKind::Uniaxial;
  if (name == "hydrostatic") return TestKind::Hydrostatic;
  if (name == "triaxial") return TestKind::Triaxial;
  throw ConfigError("unknown test kind '" + std::string(name) + "'");
}

std::string_view branch_name(Branch b) { return b == Branch::Load ? "load" : "unload"; }

std::vector<CurvePoint> ResponseCurve::branch(Branch b) const {
  std::vector<CurvePoint> out;
  std::copy_if(points.begin(), points.end(), std::back_inserter(out),
               [b](const CurvePoint& pt) { return pt.branch == b; });
  return out;
}

void ResponseCurve::check_invariants() const {
  for (Branch b : {Branch::Load, Branch::Unload}) {
    const auto pts = branch(b);
    if (pts.empty() && b == Branch::Unload) continue;
    if (pts.size() < 2) throw DataError("curve branch '" + std::string(branch_name(b)) + "' has < 2 points");
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const bool ok = b == Branch::Load ? pts[i].strain > pts[i - 1].strain : pts[i].strain < pts[i - 1].strain;
      if (!ok) throw DataError("curve strains are not strictly monotone on branch " + std::string(branch_name(b)));
    }
  }
}

ResponseCurve run_uniaxial(const ParameterVector& p, const UniaxialProtocol& proto) {
  check_driver_params(p);
  check_steps(proto.n_steps, proto.eps_max);
  ResponseCurve curve;
  curve.kind = TestKind::Uniaxial;
  curve.params = p;
  curve.points.push_back({0.0, 0.0, Branch::Load});

  const double de = proto.eps_max / proto.n_steps;
  const double tol = proto.tol_lat * p.E() * p.k1();
  MaterialState state;
  double lateral = 0.0;
  double lateral_prev = 0.0;
  for (int i = 1; i <= proto.n_steps; ++i) {
    const double axial = -de * i;
    const double guess = 2.0 * lateral - lateral_prev;
    const double step0 = std::max(std::abs(lateral - lateral_prev), 1e-3 * p.nu() * de);
    const LateralSolution sol = solve_lateral(axial, 0.0, guess, step0, tol, proto.max_iter, p, state);
    lateral_prev = lateral;
    lateral = sol.lateral;
    state = sol.result.state;
    curve.points.push_back({-axial, -sol.result.sigma(0, 0), Branch::Load});
  }
  return curve;
}

ResponseCurve run_hydrostatic(const ParameterVector& p, const HydrostaticProtocol& proto) {
  check_driver_params(p);
  check_steps(proto.n_steps, proto.eps_max);
  ResponseCurve curve;
  curve.kind = TestKind::Hydrostatic;
  curve.params = p;

  const double eps_peak = proto.peak_pressure ? find_hydro_strain(*proto.peak_pressure, proto.eps_max, p)
                                              : proto.eps_max;
  MaterialState state;
  double peak_pressure = 0.0;
  for (int i = 0; i <= proto.n_steps; ++i) {
    const double eps = eps_peak * i / proto.n_steps;
    const StepResult r = evaluate_axisymmetric(-eps, -eps, p, state);
    state = r.state;
    peak_pressure = -r.sigma(0, 0);
    curve.points.push_back({eps, peak_pressure, Branch::Load});
  }
  if (!proto.unload) return curve;

  // Unloading is linear with the volumetric modulus, which for hydrostatic
  // strain equals the bulk stiffness E/(1-2nu) on the pressure-strain plane.
  const double ev = microplane::elastic_moduli(p).EV;
  const double eps_end = eps_peak - (1.0 - proto.unload_fraction) * peak_pressure / ev;
  const int n = std::max(proto.n_unload_steps, 2);
  // The unload branch opens at the turning point so that every curve covers
  // the same pressure range on it.
  curve.points.push_back({eps_peak, peak_pressure, Branch::Unload});
  for (int i = 1; i <= n; ++i) {
    const double eps = eps_peak + (eps_end - eps_peak) * i / n;
    const StepResult r = evaluate_axisymmetric(-eps, -eps, p, state);
    state = r.state;
    curve.points.push_back({eps, -r.sigma(0, 0), Branch::Unload});
  }
  return curve;
}

ResponseCurve run_triaxial(const ParameterVector& p, double sigma_h, const TriaxialProtocol& proto) {
  check_driver_params(p);
  check_steps(proto.n_steps, proto.eps_max);
  if (!(sigma_h > 0.0)) throw ConfigError("triaxial confinement must be positive");
  ResponseCurve curve;
  curve.kind = TestKind::Triaxial;
  curve.params = p;
  curve.confinement = sigma_h;

  const double eps_h = find_hydro_strain(sigma_h, proto.hydro_scan_max, p);
  MaterialState state = evaluate_axisymmetric(-eps_h, -eps_h, p, MaterialState{}).state;
  curve.points.push_back({0.0, sigma_h, Branch::Load});

  const double de = proto.eps_max / proto.n_steps;
  const double tol = proto.tol_lat * p.E() * p.k1();
  double lateral = -eps_h;
  double lateral_prev = -eps_h;
  for (int i = 1; i <= proto.n_steps; ++i) {
    const double axial = -eps_h - de * i;
    const double guess = 2.0 * lateral - lateral_prev;
    const double step0 = std::max(std::abs(lateral - lateral_prev), 1e-3 * p.nu() * de);
    const LateralSolution sol = solve_lateral(axial, -sigma_h, guess, step0, tol, proto.max_iter, p, state);
    lateral_prev = lateral;
    lateral = sol.lateral;
    state = sol.result.state;
    curve.points.push_back({de * i, -sol.result.sigma(0, 0), Branch::Load});
  }
  return curve;
}

ResponseCurve simulate(TestKind kind, const ParameterVector& p, const Protocols& protocols,
                       std::optional<double> sigma_h) {
  switch (kind) {
    case TestKind::Uniaxial: return run_uniaxial(p, protocols.uniaxial);
    case TestKind::Hydrostatic: return run_hydrostatic(p, protocols.hydrostatic);
    case TestKind::Triaxial: {
      if (!sigma_h && protocols.triaxial.confinements.empty()) throw ConfigError("no triaxial confinement");
      return run_triaxial(p, sigma_h.value_or(protocols.triaxial.confinements.front()), protocols.triaxial);
    }
  }
  throw ConfigError("unknown test kind");
}

}  // namespace mpcal::lab
