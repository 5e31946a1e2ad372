#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mpcal {

/// The seven calibrated model parameters, in canonical order.
enum class Param : std::size_t { E = 0, nu, k1, k2, k3, k4, c20 };

inline constexpr std::size_t kNumParams = 7;
inline constexpr std::array<Param, kNumParams> kAllParams = {
    Param::E, Param::nu, Param::k1, Param::k2, Param::k3, Param::k4, Param::c20};

std::string_view param_name(Param p);
/// Parses "E", "nu", "k1", ... Throws ConfigError on unknown names.
Param param_from_name(std::string_view name);

constexpr std::size_t index(Param p) { return static_cast<std::size_t>(p); }

/// E [MPa], nu [-], k1..k4 [-], c20 [-].
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(const std::array<double, kNumParams>& values) : values_(values) {}

  double operator[](Param p) const { return values_[index(p)]; }
  double& operator[](Param p) { return values_[index(p)]; }

  double E() const { return (*this)[Param::E]; }
  double nu() const { return (*this)[Param::nu]; }
  double k1() const { return (*this)[Param::k1]; }
  double k2() const { return (*this)[Param::k2]; }
  double k3() const { return (*this)[Param::k3]; }
  double k4() const { return (*this)[Param::k4]; }
  double c20() const { return (*this)[Param::c20]; }

  const std::array<double, kNumParams>& values() const { return values_; }

  /// Physical admissibility: finite, positive, 0 < nu < 0.5.
  bool is_physical() const;

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::array<double, kNumParams> values_{};
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  double mid() const { return 0.5 * (lo + hi); }
  bool contains(double x) const { return x >= lo && x <= hi; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Closed admissible box. Construction rejects lo >= hi.
class Bounds {
 public:
  /// Table of admissible intervals for the M4-type parameters (E in MPa).
  Bounds();
  explicit Bounds(const std::array<Interval, kNumParams>& intervals);

  const Interval& operator[](Param p) const { return intervals_[index(p)]; }
  Bounds with(Param p, Interval iv) const;

  ParameterVector lower() const;
  ParameterVector upper() const;
  ParameterVector midpoint() const;

  friend bool operator==(const Bounds&, const Bounds&) = default;

 private:
  std::array<Interval, kNumParams> intervals_;
};

struct Violation {
  Param param;
  double value;
  Interval interval;
  std::string describe() const;
};

std::vector<Violation> validate(const ParameterVector& p, const Bounds& b);

std::array<double, kNumParams> normalize(const ParameterVector& p, const Bounds& b);
ParameterVector denormalize(const std::array<double, kNumParams>& u, const Bounds& b);

double normalize(Param which, double value, const Bounds& b);
double denormalize(Param which, double unit, const Bounds& b);

/// Per-parameter optional fixed values.
class FixedPolicy {
 public:
  FixedPolicy() = default;

  /// Throws ConfigError when the value is not physically admissible.
  FixedPolicy& fix(Param p, double value);
  void release(Param p) { values_[index(p)].reset(); }

  bool is_fixed(Param p) const { return values_[index(p)].has_value(); }
  std::optional<double> get(Param p) const { return values_[index(p)]; }
  std::vector<Param> free_params() const;

 private:
  std::array<std::optional<double>, kNumParams> values_{};
};

/// Unfixed parameters at interval midpoints, fixed ones copied through.
ParameterVector midpoint_fill(const FixedPolicy& fixed, const Bounds& b);

}  // namespace mpcal
