#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpcal/cascade.hpp"
#include "mpcal/grade.hpp"

namespace mpcal::cli {

struct MeasuredFiles {
  std::optional<std::filesystem::path> uniaxial;
  std::optional<std::filesystem::path> hydrostatic;
  std::vector<std::pair<double, std::filesystem::path>> triaxial;  // confinement [MPa], file
};

struct PipelineConfig {
  Bounds bounds;
  cascade::K3Variant k3_variant = cascade::K3Variant::FiveInput;
  cascade::PipelinePlan plan = cascade::build_default_plan();
  cascade::DataConfig data;
  grade::TrainConfig train;
  std::uint64_t seed = 1;
  std::size_t screening_samples = 60;
  std::size_t closed_loop_truths = 5;
  MeasuredFiles measured;
  std::filesystem::path output_dir = "run";
};

/// Reads a JSON config. Missing keys keep their defaults; unknown keys,
/// wrong types and out-of-range values raise ConfigError naming the key.
/// E bounds and a fixed E are given in GPa. Relative measured-curve paths
/// resolve against base_dir.
PipelineConfig config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

/// Every setting spelled out, in the same layout config_from_json reads.
std::string config_to_json(const PipelineConfig& config);

/// 0 success, 2 config, 3 data, 4 convergence, 5 I/O, 1 anything else.
int exit_code_for(const std::exception& e);

/// Entry point of the mpcal executable.
int run(int argc, char** argv);

}  // namespace mpcal::cli
