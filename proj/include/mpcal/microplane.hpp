#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mpcal/params.hpp"

namespace mpcal::microplane {

using Vec3 = std::array<double, 3>;

inline constexpr std::size_t kNumPlanes = 28;

/// Symmetric 3x3 tensor stored as (xx, yy, zz, yz, xz, xy).
class MacroTensor {
 public:
  MacroTensor() = default;
  MacroTensor(double xx, double yy, double zz, double yz, double xz, double xy)
      : c_{xx, yy, zz, yz, xz, xy} {}

  static MacroTensor diagonal(double xx, double yy, double zz) { return {xx, yy, zz, 0.0, 0.0, 0.0}; }
  static MacroTensor isotropic(double v) { return diagonal(v, v, v); }

  double operator()(std::size_t i, std::size_t j) const { return c_[slot(i, j)]; }
  double& operator()(std::size_t i, std::size_t j) { return c_[slot(i, j)]; }

  double trace() const { return c_[0] + c_[1] + c_[2]; }
  const std::array<double, 6>& components() const { return c_; }

  /// Contraction a^T T b.
  double contract(const Vec3& a, const Vec3& b) const;

  MacroTensor operator*(double s) const;
  MacroTensor operator+(const MacroTensor& o) const;

  friend bool operator==(const MacroTensor&, const MacroTensor&) = default;

 private:
  static constexpr std::size_t slot(std::size_t i, std::size_t j) {
    if (i == j) return i;
    return 6 - i - j;  // (1,2)->3, (0,2)->4, (0,1)->5
  }
  std::array<double, 6> c_{};
};

struct Plane {
  Vec3 n;
  Vec3 l;
  Vec3 m;
  double weight;
};

/// 28-direction hemisphere quadrature; weights sum to one.
struct MicroplaneSystem {
  std::array<Plane, kNumPlanes> planes;
};

const MicroplaneSystem& build_integration_scheme();

struct PlaneStrains {
  double epsN = 0.0;
  double epsV = 0.0;
  double epsD = 0.0;
  double epsL = 0.0;
  double epsM = 0.0;
};

struct PlaneStresses {
  double sigV = 0.0;
  double sigD = 0.0;
  double sigL = 0.0;
  double sigM = 0.0;
  double sigN() const { return sigV + sigD; }
};

/// Per-plane volumetric compaction record. eps_v_min starts at 0 and only
/// decreases; sig_v_min is the volumetric stress reached there.
struct PlaneHistory {
  double eps_v_min = 0.0;
  double sig_v_min = 0.0;
  bool boundary_hit = false;
};

struct MaterialState {
  std::array<PlaneHistory, kNumPlanes> planes{};
  bool any_boundary_active = false;
};

/// Elastic microplane moduli for the volumetric/deviatoric/tangential split.
struct ElasticModuli {
  double EV;
  double ED;
  double ET;
};
ElasticModuli elastic_moduli(const ParameterVector& p);

/// Boundary curves of the surrogate law. Compressive bounds are negative.
namespace boundary {

/// Upper bound on sigN: 1.5 E k1 exp(-<epsN - 1.5 k1> / (5 k1)).
double tensile_normal(double epsN, const ParameterVector& p);

/// Lower bound on sigV: -E k1 k3 exp(-epsV / (k1 k4)).
double volumetric_compression(double epsV, const ParameterVector& p);

/// Lower bound on sigD: -8 E k1 / (1 + (<-epsD - 8 k1> / (20 c20 k1))^2).
double deviatoric_compression(double epsD, const ParameterVector& p);

/// Upper bound on sigD. A cohesive part 2 E k1 h plus a confinement part
/// 2 B s / (B + s) (1 + h) / 2, with s = <-sigV>, B = E_T k1 k2 / 10 and
/// h = 1 / (1 + (<epsD - k1> / (5 c20 k1))^2).
double deviatoric_tension(double epsD, double sigV, const ParameterVector& p);

/// Bound on the shear magnitude. With g = 1 / (1 + (<gamma - 2 k1> / (5 sqrt(c20) k1))^2),
/// c = 0.7 <3 E_T k1 g - sigN> and A = E_T k1 k2 the cap is (0.6 + 0.4 g) A c / (A + c).
double shear(double sigN, double gamma, const ParameterVector& p);

}  // namespace boundary

PlaneStrains project_strain(const MacroTensor& eps, const Plane& plane);

struct PlaneUpdate {
  PlaneStresses stress;
  PlaneHistory history;
  bool boundary_active = false;
};

/// Elastic predictor capped by the boundary curves. Throws DataError for
/// nu >= 0.25 (non-positive tangential modulus) or non-physical parameters.
PlaneUpdate microplane_law(const PlaneStrains& s, const ParameterVector& p, const PlaneHistory& h);

MacroTensor assemble_stress(std::span<const PlaneStresses, kNumPlanes> stresses,
                            const MicroplaneSystem& system);

struct StepResult {
  MacroTensor sigma;
  MaterialState state;
};

/// project -> law -> assemble over all planes. Pure in (eps, p, state).
StepResult evaluate_step(const MacroTensor& eps, const ParameterVector& p, const MaterialState& state);

}  // namespace mpcal::microplane
