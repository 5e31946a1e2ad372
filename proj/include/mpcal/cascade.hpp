#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpcal/doe.hpp"
#include "mpcal/grade.hpp"
#include "mpcal/lab.hpp"
#include "mpcal/neural.hpp"
#include "mpcal/params.hpp"

namespace mpcal::cascade {

// ---- curve metric and curve files -------------------------------------

enum class Axis { Stress, Strain };

/// Hydrostatic curves compare strains at measured pressures, the others
/// compare stresses at measured strains.
Axis default_axis(lab::TestKind kind);

/// sqrt(sum_i (v_i - v~_i)^2) over the measured points, v~ interpolated on
/// the simulated curve branch by branch. DataError when the simulated curve
/// does not cover a measured abscissa.
double curve_error(const lab::ResponseCurve& measured, const lab::ResponseCurve& simulated, Axis axis);

/// strain,stress,branch
void write_curve_csv(const std::filesystem::path& path, const lab::ResponseCurve& curve);
lab::ResponseCurve read_curve_csv(const std::filesystem::path& path, lab::TestKind kind,
                                  std::optional<double> confinement = std::nullopt);

// ---- plan -------------------------------------------------------------

/// One simulation bundle. Parameters in `varied` follow the design;
/// `conditioned` ones take the current identification context (upstream
/// predictions or known values); plan-fixed values apply; the rest sit at
/// their midpoints.
struct BundleSpec {
  std::string name;
  lab::TestKind test = lab::TestKind::Uniaxial;
  std::vector<Param> varied;
  std::vector<Param> conditioned;
};

struct StageSpec {
  std::string name;
  Param target = Param::E;
  std::string bundle;
  std::vector<lab::FeatureSpec> features;
  std::vector<Param> upstream;  // network inputs after the features
  std::size_t n_hidden = 2;
  std::optional<Param> coupled_with;

  std::size_t n_in() const { return features.size() + upstream.size(); }
  neural::Topology topology() const { return {n_in(), n_hidden}; }
  std::vector<std::string> input_labels() const;
};

struct PipelinePlan {
  std::vector<BundleSpec> bundles;
  std::vector<StageSpec> stages;  // identification order
  FixedPolicy fixed;

  const BundleSpec& bundle(std::string_view name) const;
  const StageSpec& stage(std::string_view name) const;
  const StageSpec* stage_for(Param target) const;
  std::vector<const StageSpec*> stages_of(std::string_view bundle) const;
  /// Union of the feature lists of the bundle's stages, in stage order.
  std::vector<lab::FeatureSpec> bundle_features(std::string_view bundle) const;

  /// ConfigError when a stage reads a parameter not predicted by a strictly
  /// earlier stage (coupled partners excepted), when a bundle is conditioned
  /// on a later prediction, or when names or references are inconsistent.
  void check() const;
};

enum class K3Variant { FiveInput, FourInput };

/// E -> k1 on one uniaxial bundle, c20 on a uniaxial bundle with E and k1
/// conditioned, coupled k4/k3 on a hydrostatic bundle, k2 on a triaxial
/// bundle at the lowest confinement. nu is fixed at 0.2.
PipelinePlan build_default_plan(K3Variant k3 = K3Variant::FiveInput);

// ---- stage data -------------------------------------------------------

struct SampleRecord {
  ParameterVector params;
  std::vector<double> features;  // bundle_features order
  std::string failure;           // empty when usable
  bool ok() const { return failure.empty(); }
};

struct DataConfig {
  std::size_t n_train = 60;
  std::size_t n_test = 10;
  doe::AnnealConfig anneal;
  lab::Protocols protocols;
  unsigned jobs = 1;
  double max_failure_fraction = 0.2;
};

struct BundleData {
  std::string bundle;
  ParameterVector context;
  doe::DesignSet train_design;
  doe::DesignSet test_design;
  std::vector<lab::FeatureSpec> features;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> test;
  std::vector<lab::ResponseCurve> train_curves;  // empty points on failure
  std::vector<lab::ResponseCurve> test_curves;

  std::size_t failures() const;
};

/// Plan-fixed values, then conditioned values from the context, midpoints
/// elsewhere; varied parameters are overwritten per sample.
ParameterVector bundle_base(const PipelinePlan& plan, const BundleSpec& bundle, const Bounds& bounds,
                            const ParameterVector& context);

ParameterVector sample_vector(const BundleSpec& bundle, std::span<const double> unit_row, const Bounds& bounds,
                              const ParameterVector& base);

/// Confinement the triaxial bundle is simulated at: the lowest level.
double stage_confinement(const lab::Protocols& protocols);

struct BundleDesigns {
  doe::DesignSet train;
  doe::DesignSet test;
  double initial_objective = 0.0;  // max |r| before annealing
  double objective = 0.0;
};

/// LHS+annealing train design and random test design over the bundle's
/// varied parameters.
BundleDesigns make_bundle_designs(const PipelinePlan& plan, std::string_view bundle, std::uint64_t seed,
                                  const DataConfig& config);

/// One simulation per design row in the given context. Failed samples are
/// kept with their failure text; DataError when more than
/// max_failure_fraction fail.
BundleData simulate_bundle(const PipelinePlan& plan, std::string_view bundle, const Bounds& bounds,
                           const ParameterVector& context, const BundleDesigns& designs, const DataConfig& config);

/// make_bundle_designs followed by simulate_bundle.
BundleData generate_bundle_data(const PipelinePlan& plan, std::string_view bundle, const Bounds& bounds,
                                const ParameterVector& context, std::uint64_t seed, const DataConfig& config);

/// Features in the given order; on the first extraction error the result is
/// empty and `failure` holds the message.
std::vector<double> extract_features(const lab::ResponseCurve& curve, const std::vector<lab::FeatureSpec>& features,
                                     std::string& failure);

void check_failures(const BundleData& data, double max_failure_fraction);

/// Usable samples of one role as raw network inputs and targets. Upstream
/// inputs take the sample's true parameter values.
neural::Dataset stage_dataset(const StageSpec& stage, const BundleData& data, doe::Role role);

/// Network inputs for a stage from bundle-ordered features and known values.
std::vector<double> stage_inputs(const StageSpec& stage, const std::vector<lab::FeatureSpec>& bundle_features,
                                 std::span<const double> features, const ParameterVector& known);

// ---- training and verification ---------------------------------------

struct ErrorSummary {
  double max_pct = 0.0;
  double avg_pct = 0.0;
};

struct ErrorReport {
  double width = 0.0;  // target interval width
  std::vector<double> train_abs;
  std::vector<double> test_abs;
  ErrorSummary train;
  ErrorSummary test;
};

ErrorSummary summarize_errors(std::span<const double> abs_errors, double width);

struct CascadeStage {
  StageSpec spec;
  neural::AnnModel model;
  ErrorReport report;
  ParameterVector context;  // context the bundle was simulated in
  std::uint64_t seed = 0;
  std::size_t budget = 0;
};

/// Trains the stage network on the train set and fills the error report
/// from train and test predictions.
CascadeStage train_stage(const StageSpec& stage, const BundleData& data, const Bounds& bounds, std::uint64_t seed,
                         const grade::TrainConfig& config);

ErrorReport evaluate_stage(const neural::AnnModel& model, const StageSpec& stage, const BundleData& data,
                           const Bounds& bounds);

struct ResimulationRow {
  std::size_t sample = 0;
  ParameterVector truth;
  ParameterVector predicted;
  double error = 0.0;
  std::string failure;
};

/// Re-simulates every usable test sample of the bundle with its targets
/// replaced by the stages' predictions (upstream inputs fed by earlier
/// predictions; coupled pairs solved jointly) and reports curve_error against
/// the original test curve.
std::vector<ResimulationRow> verify_resimulation(const PipelinePlan& plan, std::span<const CascadeStage> stages,
                                                 const BundleData& data, const Bounds& bounds,
                                                 const lab::Protocols& protocols);

// ---- coupled k3/k4 ----------------------------------------------------

struct CoupledRoot {
  double k3 = 0.0;
  double k4 = 0.0;
  double residual = 0.0;  // net_k3(k4) - k3
  std::optional<double> curve_error;
};

struct CoupledSolution {
  double k3 = 0.0;
  double k4 = 0.0;
  std::size_t selected = 0;
  std::vector<CoupledRoot> roots;
  // Relation curves for plotting: (k3, k4(k3)) over the k3 grid and
  // (k3(k4), k4) over the k4 grid.
  std::vector<std::pair<double, double>> k4_relation;
  std::vector<std::pair<double, double>> k3_relation;
};

using Relation = std::function<double(double)>;
/// Error of the forward model at a candidate (k3, k4), for root selection.
using TieBreak = std::function<double(double, double)>;

inline constexpr std::size_t kCoupledGrid = 400;
inline constexpr double kCoupledTolerance = 1e-10;  // fraction of the k3 interval

/// Roots of r(k3) = k3_of_k4(k4_of_k3(k3)) - k3 on a grid scan with
/// bisection. ConvergenceError "no intersection" when r keeps one sign.
CoupledSolution solve_coupled(const Relation& k4_of_k3, const Relation& k3_of_k4, Interval k3, Interval k4,
                              const TieBreak& tie_break = {}, std::size_t grid = kCoupledGrid);

/// Network form: each net gets its own feature inputs followed by the
/// partner parameter.
CoupledSolution solve_coupled_k3k4(const neural::AnnModel& net_k4, const neural::AnnModel& net_k3,
                                   std::span<const double> k4_features, std::span<const double> k3_features,
                                   const Bounds& bounds, const TieBreak& tie_break = {});

// ---- identification ---------------------------------------------------

struct TestFit {
  lab::TestKind test = lab::TestKind::Uniaxial;
  std::optional<double> confinement;
  double error = 0.0;
  double midpoint_error = 0.0;
  std::string failure;
};

enum class Source { Fixed, Stage, Midpoint };

struct Identification {
  ParameterVector params;
  std::array<Source, kNumParams> source{};
  std::vector<std::string> warnings;
  std::vector<std::string> extrapolated;  // stages fed out-of-range inputs
  std::optional<CoupledSolution> coupled;
  std::vector<TestFit> fits;
  std::vector<CascadeStage> stages;  // stages used, in plan order
};

struct IdentifyConfig {
  Bounds bounds;
  DataConfig data;
  grade::TrainConfig train;
  std::uint64_t seed = 1;
  bool allow_training = true;
};

/// Seeds for bundle data and stage training derived from the run seed.
std::uint64_t bundle_seed(std::uint64_t seed, std::string_view bundle);
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

/// Runs the cascade on measured curves. A stage from `reuse` is taken when
/// its context matches on the bundle's conditioned parameters; otherwise the
/// bundle is simulated in the current context and the stage trained (or
/// ConfigError without allow_training). A missing curve or feature sends
/// that stage to the midpoint with a warning. Each measured curve is then
/// re-simulated at the identified vector and at the midpoint vector.
Identification identify(const PipelinePlan& plan, std::span<const lab::ResponseCurve> measured,
                        const IdentifyConfig& config, std::span<const CascadeStage> reuse = {});

/// identify without training: every stage must be supplied.
Identification validate(const PipelinePlan& plan, std::span<const lab::ResponseCurve> measured,
                        std::span<const CascadeStage> stages, const IdentifyConfig& config);

/// Synthetic measurements for a known vector: uniaxial, hydrostatic and one
/// triaxial curve per configured confinement.
std::vector<lab::ResponseCurve> synthetic_measurements(const ParameterVector& truth, const lab::Protocols& protocols);

struct ClosedLoopRow {
  ParameterVector truth;
  Identification result;
  std::array<double, kNumParams> error_pct{};  // |identified - truth| / width
};

/// Random truth vectors inside the bounds (plan-fixed parameters held),
/// identified from their own synthetic curves.
std::vector<ClosedLoopRow> closed_loop(const PipelinePlan& plan, std::size_t n_truths, const IdentifyConfig& config,
                                       std::vector<CascadeStage>& cache);

std::string_view source_name(Source s);

}  // namespace mpcal::cascade
