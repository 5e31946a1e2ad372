#include "mpcal/microplane.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mpcal/error.hpp"

namespace mpcal::microplane {
namespace {

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& v) {
  const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / len, v[1] / len, v[2] / len};
}

// l = normalize(e x n) with e the coordinate axis least aligned with n.
Plane make_plane(const Vec3& n, double w) {
  std::size_t axis = 0;
  for (std::size_t i = 1; i < 3; ++i) {
    if (std::abs(n[i]) < std::abs(n[axis])) axis = i;
  }
  Vec3 e{0.0, 0.0, 0.0};
  e[axis] = 1.0;
  const Vec3 l = normalized(cross(e, n));
  return Plane{n, l, cross(n, l), w};
}

// Octahedral orbit of (a, a, b) restricted to the upper hemisphere (z > 0).
void append_orbit(std::vector<Plane>& out, double a, double b, double w) {
  const std::array<Vec3, 3> perms = {Vec3{a, a, b}, Vec3{a, b, a}, Vec3{b, a, a}};
  for (const Vec3& base : perms) {
    for (int sx : {1, -1}) {
      for (int sy : {1, -1}) {
        const Vec3 n{sx * base[0], sy * base[1], base[2]};
        const bool seen = std::any_of(out.begin(), out.end(), [&](const Plane& p) { return p.n == n; });
        if (!seen) out.push_back(make_plane(n, w));
      }
    }
  }
}

MicroplaneSystem build_scheme() {
  // Degree-11 octahedral rule: 4 cube diagonals plus two 12-point orbits.
  constexpr double kDiag = 0.57735026918962576451;  // 1/sqrt(3)
  constexpr double kW1 = 9.0 / 280.0;
  constexpr double kA2 = 0.25056280708573158101;
  constexpr double kW2 = 0.04094894561551187370;
  constexpr double kA3 = 0.69474659060686574510;
  constexpr double kW3 = 0.03167010200353574534;

  std::vector<Plane> planes;
  append_orbit(planes, kDiag, kDiag, kW1);
  append_orbit(planes, kA2, std::sqrt(1.0 - 2.0 * kA2 * kA2), kW2);
  append_orbit(planes, kA3, std::sqrt(1.0 - 2.0 * kA3 * kA3), kW3);

  MicroplaneSystem sys{};
  std::copy(planes.begin(), planes.end(), sys.planes.begin());
  return sys;
}

double macaulay(double x) { return x > 0.0 ? x : 0.0; }

// sym(a (x) b) contracted into a tensor accumulator with scale s.
void add_sym_dyad(std::array<double, 6>& acc, const Vec3& a, const Vec3& b, double s) {
  acc[0] += s * a[0] * b[0];
  acc[1] += s * a[1] * b[1];
  acc[2] += s * a[2] * b[2];
  acc[3] += s * 0.5 * (a[1] * b[2] + a[2] * b[1]);
  acc[4] += s * 0.5 * (a[0] * b[2] + a[2] * b[0]);
  acc[5] += s * 0.5 * (a[0] * b[1] + a[1] * b[0]);
}

}  // namespace

double MacroTensor::contract(const Vec3& a, const Vec3& b) const {
  double s = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) s += a[i] * (*this)(i, j) * b[j];
  }
  return s;
}

MacroTensor MacroTensor::operator*(double s) const {
  MacroTensor r = *this;
  for (double& c : r.c_) c *= s;
  return r;
}

MacroTensor MacroTensor::operator+(const MacroTensor& o) const {
  MacroTensor r = *this;
  for (std::size_t i = 0; i < 6; ++i) r.c_[i] += o.c_[i];
  return r;
}

const MicroplaneSystem& build_integration_scheme() {
  static const MicroplaneSystem system = build_scheme();
  return system;
}

ElasticModuli elastic_moduli(const ParameterVector& p) {
  const double ev = p.E() / (1.0 - 2.0 * p.nu());
  return {ev, ev, ev * (1.0 - 4.0 * p.nu()) / (1.0 + p.nu())};
}

namespace boundary {
namespace {

// 1 / (1 + (<x - x0> / w)^2)
double decay(double x, double x0, double w) {
  const double r = macaulay(x - x0) / w;
  return 1.0 / (1.0 + r * r);
}

}  // namespace

double tensile_normal(double epsN, const ParameterVector& p) {
  return 1.5 * p.E() * p.k1() * std::exp(-macaulay(epsN - 1.5 * p.k1()) / (5.0 * p.k1()));
}

double volumetric_compression(double epsV, const ParameterVector& p) {
  return -p.E() * p.k1() * p.k3() * std::exp(-epsV / (p.k1() * p.k4()));
}

double deviatoric_compression(double epsD, const ParameterVector& p) {
  return -8.0 * p.E() * p.k1() * decay(-epsD, 8.0 * p.k1(), 20.0 * p.c20() * p.k1());
}

double deviatoric_tension(double epsD, double sigV, const ParameterVector& p) {
  const double h = decay(epsD, p.k1(), 5.0 * p.c20() * p.k1());
  const double b = elastic_moduli(p).ET * p.k1() * p.k2() / 10.0;
  const double s = macaulay(-sigV);
  return 2.0 * p.E() * p.k1() * h + 2.0 * b * s / (b + s) * 0.5 * (1.0 + h);
}

double shear(double sigN, double gamma, const ParameterVector& p) {
  const double et = elastic_moduli(p).ET;
  const double g = decay(gamma, 2.0 * p.k1(), 5.0 * std::sqrt(p.c20()) * p.k1());
  const double a = et * p.k1() * p.k2();
  const double c = 0.7 * macaulay(3.0 * et * p.k1() * g - sigN);
  if (c == 0.0) return 0.0;
  return (0.6 + 0.4 * g) * a * c / (a + c);
}

}  // namespace boundary

PlaneStrains project_strain(const MacroTensor& eps, const Plane& plane) {
  PlaneStrains s;
  s.epsN = eps.contract(plane.n, plane.n);
  s.epsV = eps.trace() / 3.0;
  s.epsD = s.epsN - s.epsV;
  s.epsL = eps.contract(plane.l, plane.n);
  s.epsM = eps.contract(plane.m, plane.n);
  return s;
}

PlaneUpdate microplane_law(const PlaneStrains& s, const ParameterVector& p, const PlaneHistory& h) {
  if (!p.is_physical() || p.nu() >= 0.25) {
    std::ostringstream os;
    os << "microplane law needs physical parameters with nu < 0.25 (nu = " << p.nu() << ")";
    throw DataError(os.str());
  }
  const ElasticModuli mod = elastic_moduli(p);
  PlaneUpdate out;
  out.history = h;
  bool active = false;

  // Volumetric: elastic, or linear unloading from the compaction record.
  double sigV = mod.EV * s.epsV;
  if (h.eps_v_min < 0.0 && s.epsV > h.eps_v_min) {
    sigV = h.sig_v_min + mod.EV * (s.epsV - h.eps_v_min);
  }
  const double fV = boundary::volumetric_compression(s.epsV, p);
  if (sigV < fV) {
    sigV = fV;
    active = true;
  }
  if (s.epsV < h.eps_v_min) {
    out.history.eps_v_min = s.epsV;
    out.history.sig_v_min = sigV;
  }

  double sigD = mod.ED * s.epsD;
  const double fDc = boundary::deviatoric_compression(s.epsD, p);
  const double fDt = boundary::deviatoric_tension(s.epsD, sigV, p);
  if (sigD < fDc) {
    sigD = fDc;
    active = true;
  } else if (sigD > fDt) {
    sigD = fDt;
    active = true;
  }

  // Normal cap through sigD; sigV gives way only if sigD hits its own floor.
  const double fN = boundary::tensile_normal(s.epsN, p);
  if (sigV + sigD > fN) {
    sigD = std::max(fN - sigV, fDc);
    sigV = std::min(sigV, fN - sigD);
    active = true;
  }

  double sigL = mod.ET * s.epsL;
  double sigM = mod.ET * s.epsM;
  const double tau = std::hypot(sigL, sigM);
  const double fT = boundary::shear(sigV + sigD, std::hypot(s.epsL, s.epsM), p);
  if (tau > fT) {
    const double scale = tau > 0.0 ? fT / tau : 0.0;
    sigL *= scale;
    sigM *= scale;
    active = true;
  }

  out.boundary_active = active;
  out.history.boundary_hit = h.boundary_hit || active;
  out.stress = {sigV, sigD, sigL, sigM};
  return out;
}

MacroTensor assemble_stress(std::span<const PlaneStresses, kNumPlanes> stresses,
                            const MicroplaneSystem& system) {
  // Unit-sum hemisphere weights: sigma = 3 sum_w [sigN N + sigL L + sigM M].
  std::array<double, 6> acc{};
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    const Plane& pl = system.planes[k];
    const PlaneStresses& st = stresses[k];
    const double s = 3.0 * pl.weight;
    add_sym_dyad(acc, pl.n, pl.n, s * st.sigN());
    add_sym_dyad(acc, pl.l, pl.n, s * st.sigL);
    add_sym_dyad(acc, pl.m, pl.n, s * st.sigM);
  }
  return {acc[0], acc[1], acc[2], acc[3], acc[4], acc[5]};
}

StepResult evaluate_step(const MacroTensor& eps, const ParameterVector& p, const MaterialState& state) {
  const MicroplaneSystem& sys = build_integration_scheme();
  std::array<PlaneStresses, kNumPlanes> stresses{};
  StepResult out{{}, state};
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    const PlaneUpdate u = microplane_law(project_strain(eps, sys.planes[k]), p, state.planes[k]);
    stresses[k] = u.stress;
    out.state.planes[k] = u.history;
    out.state.any_boundary_active = out.state.any_boundary_active || u.boundary_active;
  }
  out.sigma = assemble_stress(stresses, sys);
  return out;
}

}  // namespace mpcal::microplane
