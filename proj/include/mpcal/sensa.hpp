#pragma once

#include <array>
#include <optional>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mpcal/doe.hpp"
#include "mpcal/lab.hpp"
#include "mpcal/params.hpp"

namespace mpcal::sensa {

/// Pearson r. no_signal marks an undefined coefficient (a constant vector);
/// r is 0 then.
struct Correlation {
  double r = 0.0;
  bool no_signal = false;
};

/// Throws DataError for unequal lengths or fewer than 3 samples.
Correlation pearson(std::span<const double> x, std::span<const double> y);

enum class Response {
  StressAtStrain,  // grid in strain, response is stress (uniaxial, triaxial)
  StrainAtStress,  // grid in stress, response is load-branch strain (hydrostatic)
};

struct SensitivityProfile {
  std::vector<std::string> names;  // one per design column
  std::vector<double> grid;
  std::vector<std::vector<Correlation>> r;  // [column][grid point]
  std::vector<std::size_t> coverage;        // curves covering each grid point

  /// max |r| over the grid for one column.
  double max_abs(std::size_t column) const;
  /// Column indices ordered by decreasing max |r|.
  std::vector<std::size_t> ranking() const;
};

/// curves[i] belongs to design row rows[i]. Grid points covered by fewer
/// than 3 curves get no-signal entries.
SensitivityProfile sensitivity_profile(const doe::DesignSet& design, std::span<const std::size_t> rows,
                                       std::span<const lab::ResponseCurve> curves, std::span<const double> grid,
                                       Response response, const std::vector<std::string>& names);

/// Strain grid for stress responses: n points spaced evenly in (0, eps_max].
std::vector<double> uniform_grid(double hi, std::size_t n);

struct PeakTable {
  std::vector<Correlation> strain;  // per column
  std::vector<Correlation> stress;
};

/// peaks[i] belongs to design row rows[i].
PeakTable peak_sensitivity(const doe::DesignSet& design, std::span<const std::size_t> rows,
                           std::span<const lab::Peak> peaks);

/// grid,<name>... rows; no-signal entries are written as "nan".
void write_profile_csv(const std::filesystem::path& path, const SensitivityProfile& profile);

/// parameter,r_strain,r_stress rows.
void write_peaks_csv(const std::filesystem::path& path, const std::vector<std::string>& names, const PeakTable& table);

// ---- screening bundles ------------------------------------------------

/// Upper nu used in screening designs, kept clear of the driver limit.
inline constexpr double kScreeningNuMax = 0.235;

/// Bounds with the nu interval capped at kScreeningNuMax.
Bounds screening_bounds(const Bounds& b);

/// Profile grid: the driver's strain steps for uniaxial and triaxial, an
/// equally spaced pressure grid up to the peak pressure for hydrostatic.
std::vector<double> profile_grid(lab::TestKind test, const lab::Protocols& protocols);
Response response_for(lab::TestKind test);

struct ScreeningConfig {
  std::size_t n_samples = 60;
  doe::AnnealConfig anneal;
  lab::Protocols protocols;
  unsigned jobs = 1;
};

struct Screening {
  lab::TestKind test = lab::TestKind::Uniaxial;
  Bounds bounds;
  doe::DesignSet design;              // all seven parameters, normalized
  std::vector<std::size_t> rows;      // usable design rows
  std::vector<lab::ResponseCurve> curves;  // one per usable row
  std::vector<std::string> failures;  // "row i: message"
  SensitivityProfile profile;
  std::optional<PeakTable> peaks;     // when at least 3 curves have an interior peak
};

/// Seven-parameter LHS+annealing bundle for one test, simulated and
/// correlated. Triaxial runs at the lowest configured confinement.
Screening screen(lab::TestKind test, const Bounds& bounds, std::uint64_t seed, const ScreeningConfig& config = {});

}  // namespace mpcal::sensa
