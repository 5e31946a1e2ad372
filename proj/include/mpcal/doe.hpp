#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mpcal::doe {

enum class Role { Train, Test };

std::string_view role_name(Role r);
Role role_from_name(std::string_view name);

/// n_samples x n_params matrix of normalized coordinates, row-major.
class DesignSet {
 public:
  DesignSet() = default;
  DesignSet(std::size_t n, std::size_t d, Role role, std::uint64_t seed);

  std::size_t samples() const { return n_; }
  std::size_t dims() const { return d_; }
  Role role() const { return role_; }
  std::uint64_t seed() const { return seed_; }

  double operator()(std::size_t i, std::size_t j) const { return data_[i * d_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * d_ + j]; }

  std::span<const double> row(std::size_t i) const { return {data_.data() + i * d_, d_}; }
  std::vector<double> column(std::size_t j) const;
  const std::vector<double>& data() const { return data_; }

  friend bool operator==(const DesignSet&, const DesignSet&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  Role role_ = Role::Train;
  std::uint64_t seed_ = 0;
  std::vector<double> data_;
};

/// Each column is a seeded permutation of the stratum midpoints (i - 0.5) / n.
DesignSet lhs_sample(std::size_t n, std::size_t d, std::uint64_t seed);

/// i.i.d. uniform [0, 1) entries with role Test.
DesignSet random_sample(std::size_t n, std::size_t d, std::uint64_t seed);

/// Largest |Pearson r| over column pairs; 0 for d < 2. Constant columns
/// contribute 0.
double max_abs_correlation(const DesignSet& design);

struct AnnealConfig {
  std::size_t budget = 20000;  // proposals
  double cooling = 0.95;
  std::size_t cooling_interval = 100;
  std::size_t calibration_proposals = 100;
};

struct AnnealResult {
  DesignSet design;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::size_t proposals = 0;
  std::size_t accepted = 0;
};

/// Simulated annealing over within-column row swaps, minimizing
/// max_abs_correlation. Returns the best design visited.
AnnealResult anneal_decorrelate(const DesignSet& design, std::uint64_t seed, const AnnealConfig& config = {});

/// CSV with one row per sample; a JSON sidecar (path + ".json") records role,
/// seed and the given extra fields.
struct DesignMeta {
  std::size_t budget = 0;
  double objective = 0.0;
};
void write_design(const std::filesystem::path& path, const DesignSet& design,
                  const std::vector<std::string>& column_names, const DesignMeta& meta = {});
DesignSet read_design(const std::filesystem::path& path);

}  // namespace mpcal::doe
