#include "mpcal/params.hpp"

#include <cmath>
#include <sstream>

#include "mpcal/error.hpp"

namespace mpcal {
namespace {

constexpr std::array<std::string_view, kNumParams> kNames = {"E", "nu", "k1", "k2", "k3", "k4", "c20"};

bool admissible(Param p, double v) {
  if (!std::isfinite(v) || v <= 0.0) return false;
  return p != Param::nu || v < 0.5;
}

}  // namespace

std::string_view param_name(Param p) { return kNames[index(p)]; }

Param param_from_name(std::string_view name) {
  for (Param p : kAllParams) {
    if (kNames[index(p)] == name) return p;
  }
  throw ConfigError("unknown parameter name '" + std::string(name) + "'");
}

bool ParameterVector::is_physical() const {
  for (Param p : kAllParams) {
    if (!admissible(p, (*this)[p])) return false;
  }
  return true;
}

Bounds::Bounds()
    : Bounds({Interval{20000.0, 50000.0}, Interval{0.1, 0.3}, Interval{0.00008, 0.00025},
              Interval{100.0, 1000.0}, Interval{5.0, 15.0}, Interval{30.0, 200.0}, Interval{0.2, 5.0}}) {}

Bounds::Bounds(const std::array<Interval, kNumParams>& intervals) : intervals_(intervals) {
  for (Param p : kAllParams) {
    const Interval& iv = intervals_[index(p)];
    if (!std::isfinite(iv.lo) || !std::isfinite(iv.hi) || !(iv.lo < iv.hi)) {
      std::ostringstream os;
      os << "degenerate bounds for " << param_name(p) << ": [" << iv.lo << ", " << iv.hi << "]";
      throw ConfigError(os.str());
    }
  }
}

Bounds Bounds::with(Param p, Interval iv) const {
  auto copy = intervals_;
  copy[index(p)] = iv;
  return Bounds(copy);
}

ParameterVector Bounds::lower() const {
  ParameterVector v;
  for (Param p : kAllParams) v[p] = (*this)[p].lo;
  return v;
}

ParameterVector Bounds::upper() const {
  ParameterVector v;
  for (Param p : kAllParams) v[p] = (*this)[p].hi;
  return v;
}

ParameterVector Bounds::midpoint() const {
  ParameterVector v;
  for (Param p : kAllParams) v[p] = (*this)[p].mid();
  return v;
}

std::string Violation::describe() const {
  std::ostringstream os;
  os << param_name(param) << " = " << value << (value > interval.hi ? " > " : " < ")
     << (value > interval.hi ? interval.hi : interval.lo) << " (admissible [" << interval.lo << ", "
     << interval.hi << "])";
  return os.str();
}

std::vector<Violation> validate(const ParameterVector& p, const Bounds& b) {
  std::vector<Violation> out;
  for (Param q : kAllParams) {
    if (!b[q].contains(p[q])) out.push_back({q, p[q], b[q]});
  }
  return out;
}

double normalize(Param which, double value, const Bounds& b) {
  const Interval& iv = b[which];
  return (value - iv.lo) / iv.width();
}

double denormalize(Param which, double unit, const Bounds& b) {
  const Interval& iv = b[which];
  return iv.lo + unit * iv.width();
}

std::array<double, kNumParams> normalize(const ParameterVector& p, const Bounds& b) {
  std::array<double, kNumParams> u{};
  for (Param q : kAllParams) u[index(q)] = normalize(q, p[q], b);
  return u;
}

ParameterVector denormalize(const std::array<double, kNumParams>& u, const Bounds& b) {
  ParameterVector p;
  for (Param q : kAllParams) p[q] = denormalize(q, u[index(q)], b);
  return p;
}

FixedPolicy& FixedPolicy::fix(Param p, double value) {
  if (!admissible(p, value)) {
    std::ostringstream os;
    os << "fixed value " << value << " for " << param_name(p) << " is not admissible";
    throw ConfigError(os.str());
  }
  values_[index(p)] = value;
  return *this;
}

std::vector<Param> FixedPolicy::free_params() const {
  std::vector<Param> out;
  for (Param p : kAllParams) {
    if (!is_fixed(p)) out.push_back(p);
  }
  return out;
}

ParameterVector midpoint_fill(const FixedPolicy& fixed, const Bounds& b) {
  ParameterVector v = b.midpoint();
  for (Param p : kAllParams) {
    if (auto f = fixed.get(p)) v[p] = *f;
  }
  return v;
}

}  // namespace mpcal
