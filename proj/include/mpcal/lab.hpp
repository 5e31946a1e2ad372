#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mpcal/microplane.hpp"
#include "mpcal/params.hpp"

namespace mpcal::lab {

enum class TestKind { Uniaxial, Hydrostatic, Triaxial };
enum class Branch { Load, Unload };

std::string_view test_kind_name(TestKind k);
TestKind test_kind_from_name(std::string_view name);
std::string_view branch_name(Branch b);

struct CurvePoint {
  double strain;
  double stress;
  Branch branch;
  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

/// Compression-positive stress-strain record. Strains are strictly monotone
/// within each branch (increasing on load, decreasing on unload).
struct ResponseCurve {
  TestKind kind = TestKind::Uniaxial;
  std::vector<CurvePoint> points;
  std::optional<ParameterVector> params;  // absent for measured curves
  std::optional<double> confinement;      // sigma_H for triaxial curves

  std::vector<CurvePoint> branch(Branch b) const;
  /// Throws DataError when a branch has < 2 points or is not monotone.
  void check_invariants() const;
};

struct UniaxialProtocol {
  double eps_max = 0.01;
  int n_steps = 1000;
  double tol_lat = 1e-9;  // |sigma_lateral| <= tol_lat * E * k1
  int max_iter = 50;
};

/// With peak_pressure set, loading stops where the pressure reaches it
/// (eps_max is then the search limit); otherwise strain runs to eps_max.
struct HydrostaticProtocol {
  std::optional<double> peak_pressure = 400.0;
  double eps_max = 0.3;
  int n_steps = 120;
  bool unload = true;
  double unload_fraction = 0.1;
  int n_unload_steps = 40;
};

struct TriaxialProtocol {
  std::vector<double> confinements = {34.5, 68.9, 103.4, 137.9, 172.4};
  double eps_max = 0.05;  // excess axial strain
  int n_steps = 1000;
  double tol_lat = 1e-9;
  int max_iter = 50;
  double hydro_scan_max = 0.5;
};

/// Largest Poisson ratio the drivers accept.
inline constexpr double kMaxDriverNu = 0.24;

ResponseCurve run_uniaxial(const ParameterVector& p, const UniaxialProtocol& proto = {});
ResponseCurve run_hydrostatic(const ParameterVector& p, const HydrostaticProtocol& proto = {});
ResponseCurve run_triaxial(const ParameterVector& p, double sigma_h, const TriaxialProtocol& proto = {});

enum class FeatureKind { StressAtStrain, StrainAtStress, PeakStrain, PeakStress, YieldStrain };

struct FeatureSpec {
  FeatureKind kind = FeatureKind::PeakStress;
  double target = 0.0;
  Branch branch = Branch::Load;

  static FeatureSpec stress_at_strain(double strain) { return {FeatureKind::StressAtStrain, strain, Branch::Load}; }
  static FeatureSpec strain_at_stress(double stress, Branch b) { return {FeatureKind::StrainAtStress, stress, b}; }
  static FeatureSpec peak_strain() { return {FeatureKind::PeakStrain, 0.0, Branch::Load}; }
  static FeatureSpec peak_stress() { return {FeatureKind::PeakStress, 0.0, Branch::Load}; }
  static FeatureSpec yield_strain() { return {FeatureKind::YieldStrain, 0.0, Branch::Load}; }

  /// Short label, e.g. "sigma@0.0005", "eps@85.5/unload", "eps_peak".
  std::string label() const;
  static FeatureSpec parse(std::string_view label);

  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

/// Chord-stiffness ratio defining the yield strain.
inline constexpr double kYieldThreshold = 0.7;

double extract_feature(const ResponseCurve& c, const FeatureSpec& f, double yield_threshold = kYieldThreshold);

struct Peak {
  double strain;
  double stress;
};
/// Maximum-stress point; DataError when it sits at either end of the curve.
Peak find_peak(const ResponseCurve& c);

/// Simulate one test kind. Triaxial uses the first confinement level unless
/// sigma_h is given.
struct Protocols {
  UniaxialProtocol uniaxial;
  HydrostaticProtocol hydrostatic;
  TriaxialProtocol triaxial;
};
ResponseCurve simulate(TestKind kind, const ParameterVector& p, const Protocols& protocols,
                       std::optional<double> sigma_h = std::nullopt);

}  // namespace mpcal::lab
