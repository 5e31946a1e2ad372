#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mpcal/error.hpp"
#include "mpcal/lab.hpp"

namespace mpcal::lab {
namespace {

std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

double parse_num(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("bad number in feature label: '" + std::string(s) + "'");
  }
  return v;
}

double lerp(double x0, double y0, double x1, double y1, double x) {
  if (x1 == x0) return y0;
  return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
}

DataError out_of_range(const FeatureSpec& f, const std::vector<CurvePoint>& pts, bool by_strain) {
  std::ostringstream os;
  double lo = 0.0, hi = 0.0;
  if (!pts.empty()) {
    auto key = [&](const CurvePoint& p) { return by_strain ? p.strain : p.stress; };
    const auto [mn, mx] = std::minmax_element(pts.begin(), pts.end(),
                                              [&](const auto& a, const auto& b) { return key(a) < key(b); });
    lo = key(*mn);
    hi = key(*mx);
  }
  os << "feature " << f.label() << ": target outside recorded range [" << lo << ", " << hi
     << "] (curve too short)";
  return DataError(os.str());
}

double stress_at_strain(const ResponseCurve& c, const FeatureSpec& f) {
  const auto pts = c.branch(Branch::Load);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (f.target >= pts[i - 1].strain && f.target <= pts[i].strain) {
      return lerp(pts[i - 1].strain, pts[i - 1].stress, pts[i].strain, pts[i].stress, f.target);
    }
  }
  throw out_of_range(f, pts, true);
}

// First crossing of the target stress along the branch's recorded order.
double strain_at_stress(const ResponseCurve& c, const FeatureSpec& f) {
  const auto pts = c.branch(f.branch);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double s0 = pts[i - 1].stress - f.target;
    const double s1 = pts[i].stress - f.target;
    if (s0 == 0.0) return pts[i - 1].strain;
    if ((s0 < 0.0) != (s1 < 0.0) || s1 == 0.0) {
      return lerp(pts[i - 1].stress, pts[i - 1].strain, pts[i].stress, pts[i].strain, f.target);
    }
  }
  throw out_of_range(f, pts, false);
}

// Chord stiffness over 3-point windows [i, i+2], located at the window
// centre; the yield strain is where it first falls below theta times the
// initial stiffness, linearly interpolated between window centres.
double yield_strain(const ResponseCurve& c, double theta) {
  const auto pts = c.branch(Branch::Load);
  if (pts.size() < 4) throw DataError("yield strain: load branch too short");
  auto chord = [&](std::size_t i) {
    return (pts[i + 2].stress - pts[i].stress) / (pts[i + 2].strain - pts[i].strain);
  };
  const double k0 = (pts[1].stress - pts[0].stress) / (pts[1].strain - pts[0].strain);
  if (!(k0 > 0.0)) throw DataError("yield strain: non-positive initial stiffness");
  const double limit = theta * k0;
  double prev = chord(0);
  if (prev < limit) return pts[1].strain;
  for (std::size_t i = 1; i + 2 < pts.size(); ++i) {
    const double cur = chord(i);
    if (cur < limit) return lerp(prev, pts[i].strain, cur, pts[i + 1].strain, limit);
    prev = cur;
  }
  throw DataError("yield strain: stiffness never drops below threshold");
}

}  // namespace

std::string FeatureSpec::label() const {
  switch (kind) {
    case FeatureKind::StressAtStrain: return "sigma@" + fmt_num(target);
    case FeatureKind::StrainAtStress: return "eps@" + fmt_num(target) + "/" + std::string(branch_name(branch));
    case FeatureKind::PeakStrain: return "eps_peak";
    case FeatureKind::PeakStress: return "sigma_peak";
    case FeatureKind::YieldStrain: return "eps_yield";
  }
  return "?";
}

FeatureSpec FeatureSpec::parse(std::string_view label) {
  if (label == "eps_peak") return peak_strain();
  if (label == "sigma_peak") return peak_stress();
  if (label == "eps_yield") return yield_strain();
  if (label.starts_with("sigma@")) return stress_at_strain(parse_num(label.substr(6)));
  if (label.starts_with("eps@")) {
    const auto rest = label.substr(4);
    const auto slash = rest.find('/');
    Branch b = Branch::Load;
    auto num = rest;
    if (slash != std::string_view::npos) {
      num = rest.substr(0, slash);
      const auto br = rest.substr(slash + 1);
      if (br == "unload") {
        b = Branch::Unload;
      } else if (br != "load") {
        throw ConfigError("bad branch in feature label '" + std::string(label) + "'");
      }
    }
    return strain_at_stress(parse_num(num), b);
  }
  throw ConfigError("unknown feature label '" + std::string(label) + "'");
}

Peak find_peak(const ResponseCurve& c) {
  if (c.points.size() < 3) throw DataError("peak: curve has fewer than 3 points");
  std::size_t best = 0;
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    if (c.points[i].stress > c.points[best].stress) best = i;
  }
  if (best == 0 || best + 1 == c.points.size()) throw DataError("peak: no interior stress maximum");
  return {c.points[best].strain, c.points[best].stress};
}

double extract_feature(const ResponseCurve& c, const FeatureSpec& f, double yield_threshold) {
  switch (f.kind) {
    case FeatureKind::StressAtStrain: return stress_at_strain(c, f);
    case FeatureKind::StrainAtStress: return strain_at_stress(c, f);
    case FeatureKind::PeakStrain: return find_peak(c).strain;
    case FeatureKind::PeakStress: return find_peak(c).stress;
    case FeatureKind::YieldStrain: return yield_strain(c, yield_threshold);
  }
  throw DataError("unknown feature kind");
}

}  // namespace mpcal::lab
