#include "mpcal/sensa.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>

#include "mpcal/error.hpp"
#include "mpcal/parallel.hpp"
#include "mpcal/random.hpp"

namespace mpcal::sensa {
namespace {

// Response of one curve at a grid value, or nullopt when outside the curve.
std::optional<double> respond(const lab::ResponseCurve& c, double g, Response response) {
  const auto pts = c.branch(lab::Branch::Load);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto& a = pts[i - 1];
    const auto& b = pts[i];
    if (response == Response::StressAtStrain) {
      if (g >= a.strain && g <= b.strain) {
        return a.stress + (b.stress - a.stress) * (g - a.strain) / (b.strain - a.strain);
      }
    } else if ((g >= a.stress && g <= b.stress) || (g <= a.stress && g >= b.stress)) {
      if (b.stress == a.stress) return a.strain;
      return a.strain + (b.strain - a.strain) * (g - a.stress) / (b.stress - a.stress);
    }
  }
  return std::nullopt;
}

void check_rows(const doe::DesignSet& design, std::span<const std::size_t> rows, std::size_t n) {
  if (rows.size() != n) throw DataError("sensitivity: row index count does not match responses");
  for (std::size_t r : rows) {
    if (r >= design.samples()) throw DataError("sensitivity: row index outside design");
  }
}

}  // namespace

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("pearson: vectors differ in length");
  if (x.size() < 3) throw DataError("pearson: need at least 3 samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), false};
}

double SensitivityProfile::max_abs(std::size_t column) const {
  double m = 0.0;
  for (const Correlation& c : r.at(column)) m = std::max(m, std::abs(c.r));
  return m;
}

std::vector<std::size_t> SensitivityProfile::ranking() const {
  std::vector<std::size_t> idx(r.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return max_abs(a) > max_abs(b); });
  return idx;
}

SensitivityProfile sensitivity_profile(const doe::DesignSet& design, std::span<const std::size_t> rows,
                                       std::span<const lab::ResponseCurve> curves, std::span<const double> grid,
                                       Response response, const std::vector<std::string>& names) {
  check_rows(design, rows, curves.size());
  if (curves.size() < 3) throw DataError("sensitivity: need at least 3 curves");
  if (names.size() != design.dims()) throw ConfigError("sensitivity: one name per design column required");
  SensitivityProfile prof;
  prof.names = names;
  prof.grid.assign(grid.begin(), grid.end());
  prof.r.assign(design.dims(), std::vector<Correlation>(grid.size(), Correlation{0.0, true}));
  prof.coverage.assign(grid.size(), 0);

  std::vector<double> x, y;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<std::size_t> used;
    y.clear();
    for (std::size_t i = 0; i < curves.size(); ++i) {
      if (const auto v = respond(curves[i], grid[g], response)) {
        used.push_back(rows[i]);
        y.push_back(*v);
      }
    }
    prof.coverage[g] = used.size();
    if (used.size() < 3) continue;
    for (std::size_t j = 0; j < design.dims(); ++j) {
      x.clear();
      for (std::size_t row : used) x.push_back(design(row, j));
      prof.r[j][g] = pearson(x, y);
    }
  }
  return prof;
}

std::vector<double> uniform_grid(double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = hi * static_cast<double>(i + 1) / static_cast<double>(n);
  return g;
}

PeakTable peak_sensitivity(const doe::DesignSet& design, std::span<const std::size_t> rows,
                           std::span<const lab::Peak> peaks) {
  check_rows(design, rows, peaks.size());
  if (peaks.size() < 3) throw DataError("peak sensitivity: need at least 3 peaks");
  std::vector<double> es, ss, x;
  for (const lab::Peak& p : peaks) {
    es.push_back(p.strain);
    ss.push_back(p.stress);
  }
  PeakTable t;
  for (std::size_t j = 0; j < design.dims(); ++j) {
    x.clear();
    for (std::size_t row : rows) x.push_back(design(row, j));
    t.strain.push_back(pearson(x, es));
    t.stress.push_back(pearson(x, ss));
  }
  return t;
}

void write_profile_csv(const std::filesystem::path& path, const SensitivityProfile& profile) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "grid";
  for (const auto& n : profile.names) out << ',' << n;
  out << ",coverage\n";
  char buf[32];
  for (std::size_t g = 0; g < profile.grid.size(); ++g) {
    std::snprintf(buf, sizeof buf, "%.17g", profile.grid[g]);
    out << buf;
    for (std::size_t j = 0; j < profile.r.size(); ++j) {
      const Correlation& c = profile.r[j][g];
      if (c.no_signal) {
        out << ",nan";
      } else {
        std::snprintf(buf, sizeof buf, "%.17g", c.r);
        out << ',' << buf;
      }
    }
    out << ',' << profile.coverage[g] << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_peaks_csv(const std::filesystem::path& path, const std::vector<std::string>& names, const PeakTable& table) {
  if (names.size() != table.strain.size()) throw ConfigError("peak table: one name per column required");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "parameter,r_strain,r_stress\n";
  char buf[32];
  auto put = [&](const Correlation& c) {
    if (c.no_signal) {
      out << ",nan";
    } else {
      std::snprintf(buf, sizeof buf, "%.17g", c.r);
      out << ',' << buf;
    }
  };
  for (std::size_t j = 0; j < names.size(); ++j) {
    out << names[j];
    put(table.strain[j]);
    put(table.stress[j]);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Bounds screening_bounds(const Bounds& b) {
  Interval nu = b[Param::nu];
  nu.hi = std::min(nu.hi, kScreeningNuMax);
  if (!(nu.hi > nu.lo)) throw ConfigError("nu interval lies above the screening limit");
  return b.with(Param::nu, nu);
}

std::vector<double> profile_grid(lab::TestKind test, const lab::Protocols& protocols) {
  switch (test) {
    case lab::TestKind::Uniaxial:
      return uniform_grid(protocols.uniaxial.eps_max, static_cast<std::size_t>(protocols.uniaxial.n_steps));
    case lab::TestKind::Triaxial:
      return uniform_grid(protocols.triaxial.eps_max, static_cast<std::size_t>(protocols.triaxial.n_steps));
    case lab::TestKind::Hydrostatic: {
      const auto& h = protocols.hydrostatic;
      if (!h.peak_pressure) throw ConfigError("hydrostatic profile grid needs a peak pressure");
      return uniform_grid(*h.peak_pressure, static_cast<std::size_t>(h.n_steps));
    }
  }
  throw ConfigError("unknown test kind");
}

Response response_for(lab::TestKind test) {
  return test == lab::TestKind::Hydrostatic ? Response::StrainAtStress : Response::StressAtStrain;
}

Screening screen(lab::TestKind test, const Bounds& bounds, std::uint64_t seed, const ScreeningConfig& config) {
  Screening out;
  out.test = test;
  out.bounds = bounds;
  out.design = doe::lhs_sample(config.n_samples, kNumParams, derive_seed(seed, 1));
  out.design = doe::anneal_decorrelate(out.design, derive_seed(seed, 2), config.anneal).design;

  std::optional<double> sigma_h;
  if (test == lab::TestKind::Triaxial) {
    const auto& c = config.protocols.triaxial.confinements;
    if (c.empty()) throw ConfigError("no triaxial confinement configured");
    sigma_h = *std::min_element(c.begin(), c.end());
  }
  const std::size_t n = out.design.samples();
  std::vector<lab::ResponseCurve> curves(n);
  std::vector<std::string> errors(n);
  parallel_for(n, config.jobs, [&](std::size_t i) {
    std::array<double, kNumParams> u{};
    for (std::size_t j = 0; j < kNumParams; ++j) u[j] = out.design(i, j);
    try {
      curves[i] = lab::simulate(test, denormalize(u, bounds), config.protocols, sigma_h);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });

  std::vector<lab::Peak> peaks;
  std::vector<std::size_t> peak_rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) {
      out.failures.push_back("row " + std::to_string(i) + ": " + errors[i]);
      continue;
    }
    out.rows.push_back(i);
    if (test != lab::TestKind::Hydrostatic) {
      try {
        peaks.push_back(lab::find_peak(curves[i]));
        peak_rows.push_back(i);
      } catch (const DataError&) {
      }
    }
    out.curves.push_back(std::move(curves[i]));
  }
  std::vector<std::string> names;
  for (Param p : kAllParams) names.emplace_back(param_name(p));
  const auto grid = profile_grid(test, config.protocols);
  out.profile = sensitivity_profile(out.design, out.rows, out.curves, grid, response_for(test), names);
  if (peaks.size() >= 3) out.peaks = peak_sensitivity(out.design, peak_rows, peaks);
  return out;
}

}  // namespace mpcal::sensa
