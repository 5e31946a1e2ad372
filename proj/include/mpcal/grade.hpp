#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "mpcal/neural.hpp"

namespace mpcal::grade {

/// Must be safe to call concurrently when jobs > 1.
using Objective = std::function<double(std::span<const double>)>;

struct Box {
  std::vector<double> lo;
  std::vector<double> hi;
  std::size_t dims() const { return lo.size(); }
  static Box uniform(std::size_t d, double lo, double hi);
  /// Throws ConfigError on size mismatch or lo >= hi in any coordinate.
  void check() const;
};

struct GradeConfig {
  std::size_t population = 30;
  double p_mutation = 0.2;
  double cross_limit = 1.0;  // CL
  std::size_t stall_generations = 200;
  double radius = 0.25;  // fraction of the normalized box diagonal
  std::size_t retry_cap = 10;
  unsigned jobs = 1;
};

struct HistoryEntry {
  std::size_t generation = 0;
  double best = 0.0;
  std::size_t evals = 0;
};

struct CerafCenter {
  std::vector<double> center;  // box coordinates
  double value = 0.0;
};

struct OptimizeResult {
  std::vector<double> best;
  double best_value = 0.0;
  std::size_t evals = 0;
  std::size_t generations = 0;
  std::size_t non_finite = 0;
  std::vector<HistoryEntry> history;
  std::vector<CerafCenter> centers;
};

/// GRADE with CERAF restarts. Deterministic in seed for any jobs value.
OptimizeResult optimize(const Objective& f, const Box& box, std::size_t budget, std::uint64_t seed,
                        const GradeConfig& config = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryEntry>& history);

struct TrainConfig {
  std::size_t budget = 100000;
  double weight_bound = 20.0;
  GradeConfig grade;
};

/// Minimizes training_error over the weight box.
OptimizeResult train_weights(const neural::Topology& topology, const neural::ScaledData& data, std::uint64_t seed,
                             const TrainConfig& config = {});

/// Fits scalers on the dataset, trains, and packages an AnnModel.
neural::AnnModel train_ann(const neural::Dataset& data, const neural::Topology& topology, const Interval& target,
                           std::uint64_t seed, const TrainConfig& config = {});

}  // namespace mpcal::grade
