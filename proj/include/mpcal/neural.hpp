#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mpcal/params.hpp"

namespace mpcal::neural {

/// n_in inputs, one hidden layer, one output; both layers carry a bias.
struct Topology {
  std::size_t n_in = 1;
  std::size_t n_hidden = 1;

  /// Weights per hidden neuron (n_in + bias), then output (n_hidden + bias).
  std::size_t n_weights() const { return (n_in + 1) * n_hidden + n_hidden + 1; }
  friend bool operator==(const Topology&, const Topology&) = default;
};

struct Scaler {
  double min = 0.0;
  double max = 1.0;
  double apply(double x) const { return (x - min) / (max - min); }
  friend bool operator==(const Scaler&, const Scaler&) = default;
};

double logsig(double x);

/// Network output in (0, 1) for already-scaled inputs.
double forward_normalized(const Topology& t, std::span<const double> w, std::span<const double> x);

/// Raw-unit samples: one feature row per target value.
struct Dataset {
  std::vector<std::vector<double>> inputs;
  std::vector<double> targets;
  std::size_t size() const { return targets.size(); }
};

/// Min/max scalers over the dataset columns. A constant column gets a unit
/// window centred on its value.
std::vector<Scaler> fit_scalers(const Dataset& data);

/// Row-major scaled inputs and normalized targets, ready for the optimizer.
struct ScaledData {
  std::size_t n_in = 0;
  std::vector<double> x;
  std::vector<double> t;
  std::size_t size() const { return t.size(); }
  std::span<const double> row(std::size_t i) const { return {x.data() + i * n_in, n_in}; }
};

ScaledData scale(const Dataset& data, std::span<const Scaler> scalers, const Interval& target);

/// sqrt(sum_i (o_i - t_i)^2) over normalized outputs and targets.
double training_error(const Topology& t, std::span<const double> w, const ScaledData& data);

struct AnnModel {
  Topology topology;
  std::vector<Scaler> scalers;
  Interval output;  // target parameter interval
  std::vector<double> weights;
  std::string target;                  // parameter name
  std::vector<std::string> input_labels;

  /// Throws ConfigError when sizes disagree or a scaler is degenerate.
  void check() const;
  friend bool operator==(const AnnModel&, const AnnModel&) = default;
};

struct Prediction {
  double value = 0.0;       // physical units
  double normalized = 0.0;  // network output in (0, 1)
  bool extrapolated = false;
};

/// Inputs outside their training range pass through the scaler linearly and
/// set the extrapolated flag.
Prediction forward(const AnnModel& m, std::span<const double> raw);

void save_model(const std::filesystem::path& path, const AnnModel& m);
AnnModel load_model(const std::filesystem::path& path);
std::string model_to_json(const AnnModel& m);
AnnModel model_from_json(const std::string& text);

/// Returns trained weights for a topology.
using Trainer = std::function<std::vector<double>(const Topology&, const ScaledData&)>;

struct SizeTrial {
  std::size_t n_hidden = 0;
  double train_error = 0.0;
  double test_error = 0.0;
  std::vector<double> weights;
  std::string failure;  // non-empty when training threw
};

struct SizeSelection {
  Topology chosen;
  std::vector<double> weights;
  std::vector<SizeTrial> table;
};

/// Trains one network per candidate size; picks the smallest test error,
/// ties going to fewer hidden neurons.
SizeSelection select_hidden_size(std::span<const std::size_t> candidates, std::size_t n_in, const ScaledData& train,
                                 const ScaledData& test, const Trainer& trainer);

}  // namespace mpcal::neural
