#include "mpcal/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "mpcal/error.hpp"
#include "mpcal/parallel.hpp"
#include "mpcal/random.hpp"

namespace mpcal::cascade {
namespace {

using lab::Branch;
using lab::CurvePoint;
using lab::FeatureSpec;
using lab::ResponseCurve;
using lab::TestKind;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Ordinate at abscissa x along the first segment that brackets it. Exact
// hits return the recorded point; an x past either end by at most
// kEndSlack of the branch span snaps to that end.
constexpr double kEndSlack = 1e-9;

std::optional<double> interpolate(const std::vector<CurvePoint>& pts, double x, Axis axis) {
  auto abscissa = [&](const CurvePoint& p) { return axis == Axis::Stress ? p.strain : p.stress; };
  auto ordinate = [&](const CurvePoint& p) { return axis == Axis::Stress ? p.stress : p.strain; };
  if (pts.size() >= 2) {
    const double span = std::abs(abscissa(pts.back()) - abscissa(pts.front()));
    for (const CurvePoint* end : {&pts.front(), &pts.back()}) {
      if (std::abs(x - abscissa(*end)) <= kEndSlack * span) x = abscissa(*end);
    }
  }
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double x0 = abscissa(pts[i - 1]);
    const double x1 = abscissa(pts[i]);
    if (x == x0) return ordinate(pts[i - 1]);
    if (x == x1) return ordinate(pts[i]);
    if ((x > x0 && x < x1) || (x < x0 && x > x1)) {
      const double y0 = ordinate(pts[i - 1]);
      const double y1 = ordinate(pts[i]);
      return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
    }
  }
  return std::nullopt;
}

bool same_on(const ParameterVector& a, const ParameterVector& b, const std::vector<Param>& which) {
  for (Param p : which) {
    if (a[p] != b[p]) return false;
  }
  return true;
}

}  // namespace

// ---- curve metric and curve files -------------------------------------

Axis default_axis(TestKind kind) { return kind == TestKind::Hydrostatic ? Axis::Strain : Axis::Stress; }

double curve_error(const ResponseCurve& measured, const ResponseCurve& simulated, Axis axis) {
  double ss = 0.0;
  for (Branch b : {Branch::Load, Branch::Unload}) {
    const auto m = measured.branch(b);
    if (m.empty()) continue;
    const auto s = simulated.branch(b);
    if (s.size() < 2) {
      throw DataError("curve error: simulated curve has no " + std::string(lab::branch_name(b)) + " branch");
    }
    for (const CurvePoint& p : m) {
      const double x = axis == Axis::Stress ? p.strain : p.stress;
      const double v = axis == Axis::Stress ? p.stress : p.strain;
      const auto vs = interpolate(s, x, axis);
      if (!vs) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const CurvePoint& q : s) {
          const double a = axis == Axis::Stress ? q.strain : q.stress;
          lo = std::min(lo, a);
          hi = std::max(hi, a);
        }
        throw DataError("curve error: measured " + std::string(axis == Axis::Stress ? "strain " : "stress ") +
                        fmt(x) + " on the " + std::string(lab::branch_name(b)) +
                        " branch is not covered by the simulated range [" + fmt(lo) + ", " + fmt(hi) + "]");
      }
      ss += (v - *vs) * (v - *vs);
    }
  }
  return std::sqrt(ss);
}

void write_curve_csv(const std::filesystem::path& path, const ResponseCurve& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "strain,stress,branch\n";
  char buf[96];
  for (const CurvePoint& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,", p.strain, p.stress);
    out << buf << lab::branch_name(p.branch) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ResponseCurve read_curve_csv(const std::filesystem::path& path, TestKind kind, std::optional<double> confinement) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  ResponseCurve c;
  c.kind = kind;
  c.confinement = confinement;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("strain", 0) == 0) continue;
    std::istringstream ls(line);
    std::string a, b, br;
    std::getline(ls, a, ',');
    std::getline(ls, b, ',');
    std::getline(ls, br, ',');
    CurvePoint p{};
    try {
      std::size_t ia = 0, ib = 0;
      p.strain = std::stod(a, &ia);
      p.stress = std::stod(b, &ib);
      if (ia != a.size() || ib != b.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected strain,stress[,branch]");
    }
    p.branch = br.empty() ? Branch::Load : (br == "unload" ? Branch::Unload : Branch::Load);
    if (!br.empty() && br != "load" && br != "unload") {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown branch '" + br + "'");
    }
    c.points.push_back(p);
  }
  c.check_invariants();
  return c;
}

// ---- plan -------------------------------------------------------------

std::vector<std::string> StageSpec::input_labels() const {
  std::vector<std::string> out;
  for (const FeatureSpec& f : features) out.push_back(f.label());
  for (Param p : upstream) out.emplace_back(param_name(p));
  return out;
}

const BundleSpec& PipelinePlan::bundle(std::string_view name) const {
  for (const BundleSpec& b : bundles) {
    if (b.name == name) return b;
  }
  throw ConfigError("unknown bundle '" + std::string(name) + "'");
}

const StageSpec& PipelinePlan::stage(std::string_view name) const {
  for (const StageSpec& s : stages) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown stage '" + std::string(name) + "'");
}

const StageSpec* PipelinePlan::stage_for(Param target) const {
  for (const StageSpec& s : stages) {
    if (s.target == target) return &s;
  }
  return nullptr;
}

std::vector<const StageSpec*> PipelinePlan::stages_of(std::string_view bundle) const {
  std::vector<const StageSpec*> out;
  for (const StageSpec& s : stages) {
    if (s.bundle == bundle) out.push_back(&s);
  }
  return out;
}

std::vector<FeatureSpec> PipelinePlan::bundle_features(std::string_view bundle) const {
  std::vector<FeatureSpec> out;
  for (const StageSpec* s : stages_of(bundle)) {
    for (const FeatureSpec& f : s->features) {
      if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
    }
  }
  return out;
}

void PipelinePlan::check() const {
  std::set<std::string> names;
  for (const BundleSpec& b : bundles) {
    if (!names.insert(b.name).second) throw ConfigError("duplicate bundle '" + b.name + "'");
    if (b.varied.empty()) throw ConfigError("bundle '" + b.name + "' varies no parameter");
    for (Param p : b.varied) {
      if (fixed.is_fixed(p)) {
        throw ConfigError("bundle '" + b.name + "' varies fixed parameter " + std::string(param_name(p)));
      }
    }
  }
  std::set<Param> predicted;
  std::set<std::string> stage_names;
  std::set<std::string> started;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    if (!stage_names.insert(s.name).second) throw ConfigError("duplicate stage '" + s.name + "'");
    const BundleSpec& b = bundle(s.bundle);
    if (s.n_hidden < 1 || s.n_in() < 1) throw ConfigError("stage '" + s.name + "' has an empty topology");
    if (std::find(b.varied.begin(), b.varied.end(), s.target) == b.varied.end()) {
      throw ConfigError("stage '" + s.name + "' targets a parameter its bundle does not vary");
    }
    if (predicted.count(s.target)) throw ConfigError("parameter predicted twice by stage '" + s.name + "'");
    if (started.insert(s.bundle).second) {
      for (Param p : b.conditioned) {
        if (!predicted.count(p) && !fixed.is_fixed(p)) {
          throw ConfigError("bundle '" + b.name + "' is conditioned on " + std::string(param_name(p)) +
                            ", which no earlier stage predicts");
        }
      }
    }
    for (Param p : s.upstream) {
      const bool partner = s.coupled_with && *s.coupled_with == p;
      if (!predicted.count(p) && !partner) {
        throw ConfigError("stage '" + s.name + "' reads " + std::string(param_name(p)) +
                          " before any stage predicts it");
      }
    }
    if (s.coupled_with) {
      const StageSpec* other = stage_for(*s.coupled_with);
      if (!other || !other->coupled_with || *other->coupled_with != s.target || other->bundle != s.bundle) {
        throw ConfigError("stage '" + s.name + "' declares an unmatched coupling");
      }
      const auto has = [](const StageSpec& st, Param p) {
        return std::find(st.upstream.begin(), st.upstream.end(), p) != st.upstream.end();
      };
      if (!has(s, other->target) || !has(*other, s.target) || s.upstream.back() != other->target) {
        throw ConfigError("coupled stages '" + s.name + "' and '" + other->name + "' must read each other as their last input");
      }
      if (s.target != Param::k3 && s.target != Param::k4) {
        throw ConfigError("only the k3/k4 pair may be coupled");
      }
    }
    predicted.insert(s.target);
  }
}

PipelinePlan build_default_plan(K3Variant k3) {
  using F = FeatureSpec;
  PipelinePlan plan;
  plan.fixed.fix(Param::nu, 0.2);
  plan.bundles = {
      {"uniaxial", TestKind::Uniaxial, {Param::E, Param::k1, Param::k2, Param::k3, Param::k4, Param::c20}, {}},
      {"c20", TestKind::Uniaxial, {Param::c20}, {Param::E, Param::k1}},
      {"hydrostatic", TestKind::Hydrostatic, {Param::k3, Param::k4}, {Param::E, Param::k1}},
      {"triaxial", TestKind::Triaxial, {Param::k2}, {Param::E, Param::k1, Param::c20, Param::k3, Param::k4}},
  };
  StageSpec e{"E", Param::E, "uniaxial",
              {F::stress_at_strain(0.0005), F::stress_at_strain(0.001), F::stress_at_strain(0.0015)}, {}, 2, {}};
  StageSpec k1{"k1", Param::k1, "uniaxial",
               {F::stress_at_strain(0.0025), F::stress_at_strain(0.009), F::peak_strain(), F::peak_stress()},
               {Param::E}, 3, {}};
  StageSpec c20{"c20", Param::c20, "c20",
                {F::stress_at_strain(0.003), F::stress_at_strain(0.004), F::stress_at_strain(0.006),
                 F::stress_at_strain(0.008)},
                {}, 2, {}};
  StageSpec k4{"k4", Param::k4, "hydrostatic",
               {F::peak_strain(), F::strain_at_stress(85.5, Branch::Unload)}, {Param::k3}, 2, Param::k3};
  StageSpec k3s{"k3", Param::k3, "hydrostatic", {}, {Param::k4}, 2, Param::k4};
  if (k3 == K3Variant::FiveInput) {
    k3s.features = {F::peak_strain(), F::yield_strain(), F::strain_at_stress(137.0, Branch::Load),
                    F::strain_at_stress(308.0, Branch::Load)};
  } else {
    k3s.features = {F::peak_strain(), F::yield_strain(), F::strain_at_stress(214.0, Branch::Load)};
  }
  StageSpec k2{"k2", Param::k2, "triaxial",
               {F::peak_stress(), F::stress_at_strain(0.0128), F::stress_at_strain(0.0308)}, {}, 2, {}};
  plan.stages = {e, k1, c20, k4, k3s, k2};
  plan.check();
  return plan;
}

// ---- stage data -------------------------------------------------------

std::size_t BundleData::failures() const {
  std::size_t n = 0;
  for (const auto* set : {&train, &test}) {
    for (const SampleRecord& r : *set) n += r.ok() ? 0 : 1;
  }
  return n;
}

ParameterVector bundle_base(const PipelinePlan& plan, const BundleSpec& bundle, const Bounds& bounds,
                            const ParameterVector& context) {
  ParameterVector base = bounds.midpoint();
  for (Param p : bundle.conditioned) base[p] = context[p];
  for (Param p : kAllParams) {
    if (auto v = plan.fixed.get(p)) base[p] = *v;
  }
  return base;
}

ParameterVector sample_vector(const BundleSpec& bundle, std::span<const double> unit_row, const Bounds& bounds,
                              const ParameterVector& base) {
  if (unit_row.size() != bundle.varied.size()) throw ConfigError("design width does not match bundle '" + bundle.name + "'");
  ParameterVector p = base;
  for (std::size_t j = 0; j < unit_row.size(); ++j) p[bundle.varied[j]] = denormalize(bundle.varied[j], unit_row[j], bounds);
  return p;
}

double stage_confinement(const lab::Protocols& protocols) {
  const auto& c = protocols.triaxial.confinements;
  if (c.empty()) throw ConfigError("no triaxial confinement configured");
  return *std::min_element(c.begin(), c.end());
}

BundleDesigns make_bundle_designs(const PipelinePlan& plan, std::string_view name, std::uint64_t seed,
                                  const DataConfig& config) {
  const std::size_t d = plan.bundle(name).varied.size();
  BundleDesigns out;
  out.train = doe::lhs_sample(config.n_train, d, derive_seed(seed, 1));
  out.initial_objective = doe::max_abs_correlation(out.train);
  out.objective = out.initial_objective;
  if (d >= 2) {
    doe::AnnealResult annealed = doe::anneal_decorrelate(out.train, derive_seed(seed, 2), config.anneal);
    out.train = std::move(annealed.design);
    out.objective = annealed.final_objective;
  }
  out.test = doe::random_sample(config.n_test, d, derive_seed(seed, 3));
  return out;
}

BundleData simulate_bundle(const PipelinePlan& plan, std::string_view name, const Bounds& bounds,
                           const ParameterVector& context, const BundleDesigns& designs, const DataConfig& config) {
  const BundleSpec& bundle = plan.bundle(name);
  if (designs.train.dims() != bundle.varied.size() || designs.test.dims() != bundle.varied.size()) {
    throw DataError("design width does not match bundle '" + bundle.name + "'");
  }
  BundleData data;
  data.bundle = bundle.name;
  data.context = bundle_base(plan, bundle, bounds, context);
  data.features = plan.bundle_features(name);
  data.train_design = designs.train;
  data.test_design = designs.test;

  const std::size_t n_train = data.train_design.samples();
  const std::size_t n = n_train + data.test_design.samples();
  std::vector<SampleRecord> records(n);
  std::vector<ResponseCurve> curves(n);
  const std::optional<double> sigma_h =
      bundle.test == TestKind::Triaxial ? std::optional<double>(stage_confinement(config.protocols)) : std::nullopt;

  parallel_for(n, config.jobs, [&](std::size_t i) {
    const auto row = i < n_train ? data.train_design.row(i) : data.test_design.row(i - n_train);
    SampleRecord& rec = records[i];
    rec.params = sample_vector(bundle, row, bounds, data.context);
    try {
      curves[i] = lab::simulate(bundle.test, rec.params, config.protocols, sigma_h);
    } catch (const Error& e) {
      rec.failure = std::string("simulation: ") + e.what();
      curves[i] = ResponseCurve{};
      curves[i].kind = bundle.test;
      return;
    }
    rec.features = extract_features(curves[i], data.features, rec.failure);
  });

  data.train.assign(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.test.assign(records.begin() + static_cast<std::ptrdiff_t>(n_train), records.end());
  data.train_curves.assign(curves.begin(), curves.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.test_curves.assign(curves.begin() + static_cast<std::ptrdiff_t>(n_train), curves.end());
  check_failures(data, config.max_failure_fraction);
  return data;
}

BundleData generate_bundle_data(const PipelinePlan& plan, std::string_view name, const Bounds& bounds,
                                const ParameterVector& context, std::uint64_t seed, const DataConfig& config) {
  return simulate_bundle(plan, name, bounds, context, make_bundle_designs(plan, name, seed, config), config);
}

std::vector<double> extract_features(const ResponseCurve& curve, const std::vector<FeatureSpec>& features,
                                     std::string& failure) {
  std::vector<double> out;
  for (const FeatureSpec& f : features) {
    try {
      out.push_back(lab::extract_feature(curve, f));
    } catch (const Error& e) {
      failure = e.what();
      return {};
    }
  }
  return out;
}

void check_failures(const BundleData& data, double max_failure_fraction) {
  const std::size_t n = data.train.size() + data.test.size();
  const std::size_t failed = data.failures();
  if (static_cast<double>(failed) <= max_failure_fraction * static_cast<double>(n)) return;
  std::string first;
  for (const auto* set : {&data.train, &data.test}) {
    for (const SampleRecord& r : *set) {
      if (!r.ok() && first.empty()) first = r.failure;
    }
  }
  throw DataError("bundle '" + data.bundle + "': " + std::to_string(failed) + " of " + std::to_string(n) +
                  " samples failed (design likely ill-posed); first: " + first);
}

std::vector<double> stage_inputs(const StageSpec& stage, const std::vector<FeatureSpec>& bundle_features,
                                 std::span<const double> features, const ParameterVector& known) {
  std::vector<double> x;
  x.reserve(stage.n_in());
  for (const FeatureSpec& f : stage.features) {
    const auto it = std::find(bundle_features.begin(), bundle_features.end(), f);
    if (it == bundle_features.end()) throw ConfigError("feature " + f.label() + " missing from bundle");
    x.push_back(features[static_cast<std::size_t>(it - bundle_features.begin())]);
  }
  for (Param p : stage.upstream) x.push_back(known[p]);
  return x;
}

neural::Dataset stage_dataset(const StageSpec& stage, const BundleData& data, doe::Role role) {
  neural::Dataset out;
  for (const SampleRecord& r : role == doe::Role::Train ? data.train : data.test) {
    if (!r.ok()) continue;
    out.inputs.push_back(stage_inputs(stage, data.features, r.features, r.params));
    out.targets.push_back(r.params[stage.target]);
  }
  return out;
}

// ---- training and verification ---------------------------------------

ErrorSummary summarize_errors(std::span<const double> abs_errors, double width) {
  ErrorSummary s;
  if (abs_errors.empty()) return s;
  double sum = 0.0;
  for (double e : abs_errors) {
    s.max_pct = std::max(s.max_pct, e);
    sum += e;
  }
  s.max_pct *= 100.0 / width;
  s.avg_pct = 100.0 * sum / (static_cast<double>(abs_errors.size()) * width);
  return s;
}

ErrorReport evaluate_stage(const neural::AnnModel& model, const StageSpec& stage, const BundleData& data,
                           const Bounds& bounds) {
  ErrorReport rep;
  rep.width = bounds[stage.target].width();
  for (doe::Role role : {doe::Role::Train, doe::Role::Test}) {
    const neural::Dataset ds = stage_dataset(stage, data, role);
    auto& errs = role == doe::Role::Train ? rep.train_abs : rep.test_abs;
    for (std::size_t i = 0; i < ds.size(); ++i) errs.push_back(std::abs(neural::forward(model, ds.inputs[i]).value - ds.targets[i]));
  }
  rep.train = summarize_errors(rep.train_abs, rep.width);
  rep.test = summarize_errors(rep.test_abs, rep.width);
  return rep;
}

CascadeStage train_stage(const StageSpec& stage, const BundleData& data, const Bounds& bounds, std::uint64_t seed,
                         const grade::TrainConfig& config) {
  if (data.bundle != stage.bundle) throw ConfigError("stage '" + stage.name + "' given data of bundle '" + data.bundle + "'");
  const neural::Dataset train = stage_dataset(stage, data, doe::Role::Train);
  if (train.size() == 0) throw DataError("stage '" + stage.name + "': no usable training samples");
  CascadeStage out;
  out.spec = stage;
  out.context = data.context;
  out.seed = seed;
  out.budget = config.budget;
  out.model = grade::train_ann(train, stage.topology(), bounds[stage.target], seed, config);
  out.model.target = std::string(param_name(stage.target));
  out.model.input_labels = stage.input_labels();
  out.report = evaluate_stage(out.model, stage, data, bounds);
  return out;
}

namespace {

const CascadeStage& find_stage(std::span<const CascadeStage> stages, std::string_view name) {
  for (const CascadeStage& s : stages) {
    if (s.spec.name == name) return s;
  }
  throw ConfigError("stage '" + std::string(name) + "' has not been trained");
}

// Predicts the bundle's stages in plan order into `known`. Coupled pairs are
// solved jointly with the given tie-break.
struct BundlePrediction {
  bool extrapolated = false;
  std::optional<CoupledSolution> coupled;
};

BundlePrediction predict_bundle(const PipelinePlan& plan, std::span<const CascadeStage> stages,
                                const std::string& bundle, std::span<const double> features, const Bounds& bounds,
                                ParameterVector& known, const TieBreak& tie_break,
                                std::vector<std::string>* extrapolated) {
  BundlePrediction out;
  const auto bf = plan.bundle_features(bundle);
  std::set<std::string> done;
  for (const StageSpec* s : plan.stages_of(bundle)) {
    if (done.count(s->name)) continue;
    const CascadeStage& cs = find_stage(stages, s->name);
    if (s->coupled_with) {
      const StageSpec* partner = plan.stage_for(*s->coupled_with);
      const CascadeStage& cp = find_stage(stages, partner->name);
      const CascadeStage& net_k4 = s->target == Param::k4 ? cs : cp;
      const CascadeStage& net_k3 = s->target == Param::k4 ? cp : cs;
      ParameterVector dummy = known;
      auto f4 = stage_inputs(net_k4.spec, bf, features, dummy);
      auto f3 = stage_inputs(net_k3.spec, bf, features, dummy);
      f4.pop_back();
      f3.pop_back();
      CoupledSolution sol = solve_coupled_k3k4(net_k4.model, net_k3.model, f4, f3, bounds, tie_break);
      known[Param::k3] = sol.k3;
      known[Param::k4] = sol.k4;
      // Inputs outside the training range, partner value included.
      for (const CascadeStage* c : {&net_k4, &net_k3}) {
        const auto x = stage_inputs(c->spec, bf, features, known);
        if (neural::forward(c->model, x).extrapolated) {
          out.extrapolated = true;
          if (extrapolated) extrapolated->push_back(c->spec.name);
        }
      }
      out.coupled = std::move(sol);
      done.insert(s->name);
      done.insert(partner->name);
      continue;
    }
    const auto x = stage_inputs(*s, bf, features, known);
    const neural::Prediction p = neural::forward(cs.model, x);
    known[s->target] = p.value;
    if (p.extrapolated) {
      out.extrapolated = true;
      if (extrapolated) extrapolated->push_back(s->name);
    }
    done.insert(s->name);
  }
  return out;
}

ResponseCurve simulate_like(const ResponseCurve& measured, const ParameterVector& p, const lab::Protocols& protocols) {
  return lab::simulate(measured.kind, p, protocols, measured.confinement);
}

}  // namespace

std::vector<ResimulationRow> verify_resimulation(const PipelinePlan& plan, std::span<const CascadeStage> stages,
                                                 const BundleData& data, const Bounds& bounds,
                                                 const lab::Protocols& protocols) {
  const BundleSpec& bundle = plan.bundle(data.bundle);
  const Axis axis = default_axis(bundle.test);
  std::vector<ResimulationRow> rows;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const SampleRecord& r = data.test[i];
    if (!r.ok()) continue;
    ResimulationRow row;
    row.sample = i;
    row.truth = r.params;
    row.predicted = r.params;
    try {
      const ResponseCurve& original = data.test_curves[i];
      TieBreak tb = [&](double k3, double k4) {
        ParameterVector q = row.predicted;
        q[Param::k3] = k3;
        q[Param::k4] = k4;
        return curve_error(original, simulate_like(original, q, protocols), axis);
      };
      predict_bundle(plan, stages, data.bundle, r.features, bounds, row.predicted, tb, nullptr);
      row.error = curve_error(original, simulate_like(original, row.predicted, protocols), axis);
    } catch (const Error& e) {
      row.failure = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- coupled k3/k4 ----------------------------------------------------

CoupledSolution solve_coupled(const Relation& k4_of_k3, const Relation& k3_of_k4, Interval k3, Interval k4,
                              const TieBreak& tie_break, std::size_t grid) {
  if (grid < 2) throw ConfigError("coupled solve needs at least 2 grid points");
  if (!(k3.hi > k3.lo) || !(k4.hi > k4.lo)) throw ConfigError("coupled solve needs non-empty intervals");
  CoupledSolution sol;
  const double tol = kCoupledTolerance * k3.width();
  auto residual = [&](double x) { return k3_of_k4(k4_of_k3(x)) - x; };

  std::vector<double> xs(grid), rs(grid);
  for (std::size_t i = 0; i < grid; ++i) {
    xs[i] = k3.lo + k3.width() * static_cast<double>(i) / static_cast<double>(grid - 1);
    rs[i] = residual(xs[i]);
    sol.k4_relation.emplace_back(xs[i], k4_of_k3(xs[i]));
    const double y = k4.lo + k4.width() * static_cast<double>(i) / static_cast<double>(grid - 1);
    sol.k3_relation.emplace_back(k3_of_k4(y), y);
  }

  auto add_root = [&](double x) {
    CoupledRoot r;
    r.k3 = x;
    r.k4 = k4_of_k3(x);
    r.residual = k3_of_k4(r.k4) - x;
    sol.roots.push_back(r);
  };
  for (std::size_t i = 0; i < grid; ++i) {
    if (rs[i] == 0.0) {
      add_root(xs[i]);
      continue;
    }
    if (i + 1 < grid && rs[i + 1] != 0.0 && (rs[i] < 0.0) != (rs[i + 1] < 0.0)) {
      double a = xs[i], b = xs[i + 1], ra = rs[i];
      double m = 0.5 * (a + b);
      for (int it = 0; it < 200; ++it) {
        m = 0.5 * (a + b);
        const double rm = residual(m);
        if (std::abs(rm) < tol || rm == 0.0) break;
        if ((rm < 0.0) == (ra < 0.0)) {
          a = m;
          ra = rm;
        } else {
          b = m;
        }
      }
      add_root(m);
    }
  }
  if (sol.roots.empty()) {
    const auto [mn, mx] = std::minmax_element(rs.begin(), rs.end());
    throw ConvergenceError("coupled k3/k4 solve: no intersection in bounds; residual ranges over [" + fmt(*mn) + ", " +
                           fmt(*mx) + "]");
  }
  sol.selected = 0;
  if (sol.roots.size() > 1 && tie_break) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < sol.roots.size(); ++i) {
      try {
        sol.roots[i].curve_error = tie_break(sol.roots[i].k3, sol.roots[i].k4);
      } catch (const Error&) {
        continue;
      }
      if (*sol.roots[i].curve_error < best) {
        best = *sol.roots[i].curve_error;
        sol.selected = i;
      }
    }
  }
  sol.k3 = sol.roots[sol.selected].k3;
  sol.k4 = sol.roots[sol.selected].k4;
  return sol;
}

CoupledSolution solve_coupled_k3k4(const neural::AnnModel& net_k4, const neural::AnnModel& net_k3,
                                   std::span<const double> k4_features, std::span<const double> k3_features,
                                   const Bounds& bounds, const TieBreak& tie_break) {
  std::vector<double> x4(k4_features.begin(), k4_features.end());
  std::vector<double> x3(k3_features.begin(), k3_features.end());
  x4.push_back(0.0);
  x3.push_back(0.0);
  Relation k4_of_k3 = [&](double k3) {
    x4.back() = k3;
    return neural::forward(net_k4, x4).value;
  };
  Relation k3_of_k4 = [&](double k4) {
    x3.back() = k4;
    return neural::forward(net_k3, x3).value;
  };
  return solve_coupled(k4_of_k3, k3_of_k4, bounds[Param::k3], bounds[Param::k4], tie_break);
}

// ---- identification ---------------------------------------------------

std::string_view source_name(Source s) {
  switch (s) {
    case Source::Fixed: return "fixed";
    case Source::Stage: return "stage";
    case Source::Midpoint: return "midpoint";
  }
  return "?";
}

std::uint64_t bundle_seed(std::uint64_t seed, std::string_view bundle) { return derive_seed(seed, fnv1a(bundle), 1); }
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return derive_seed(seed, fnv1a(stage), 2); }

namespace {

const ResponseCurve* measured_for(const BundleSpec& bundle, std::span<const ResponseCurve> measured,
                                  const lab::Protocols& protocols, std::string& why) {
  const ResponseCurve* best = nullptr;
  for (const ResponseCurve& c : measured) {
    if (c.kind != bundle.test) continue;
    if (bundle.test != TestKind::Triaxial) return &c;
    if (!c.confinement) continue;
    if (!best || *c.confinement < *best->confinement) best = &c;
  }
  if (bundle.test == TestKind::Triaxial && best) {
    const double want = stage_confinement(protocols);
    if (std::abs(*best->confinement - want) > 1e-9 * std::max(1.0, want)) {
      why = "lowest measured triaxial confinement " + fmt(*best->confinement) + " MPa differs from the stage level " +
            fmt(want) + " MPa";
      return nullptr;
    }
  }
  if (!best) why = "no measured " + std::string(lab::test_kind_name(bundle.test)) + " curve";
  return best;
}

}  // namespace

Identification identify(const PipelinePlan& plan, std::span<const ResponseCurve> measured,
                        const IdentifyConfig& config, std::span<const CascadeStage> reuse) {
  plan.check();
  const Bounds& bounds = config.bounds;
  Identification out;
  out.params = bounds.midpoint();
  out.source.fill(Source::Midpoint);
  for (Param p : kAllParams) {
    if (auto v = plan.fixed.get(p)) {
      out.params[p] = *v;
      out.source[index(p)] = Source::Fixed;
    }
  }

  std::vector<std::string> order;
  for (const StageSpec& s : plan.stages) {
    if (std::find(order.begin(), order.end(), s.bundle) == order.end()) order.push_back(s.bundle);
  }

  for (const std::string& name : order) {
    const BundleSpec& bundle = plan.bundle(name);
    const auto members = plan.stages_of(name);
    auto fallback = [&](const std::string& why) {
      for (const StageSpec* s : members) {
        out.params[s->target] = bounds[s->target].mid();
        out.source[index(s->target)] = Source::Midpoint;
        out.warnings.push_back("stage " + s->name + ": " + why + "; " + std::string(param_name(s->target)) +
                               " set to the midpoint " + fmt(bounds[s->target].mid()));
      }
    };

    std::string why;
    const ResponseCurve* curve = measured_for(bundle, measured, config.data.protocols, why);
    if (!curve) {
      fallback(why);
      continue;
    }
    const auto bf = plan.bundle_features(name);
    std::vector<double> features;
    try {
      for (const FeatureSpec& f : bf) features.push_back(lab::extract_feature(*curve, f));
    } catch (const Error& e) {
      fallback(std::string("measured feature unavailable (") + e.what() + ")");
      continue;
    }

    // Stages for this bundle: reused when trained in the same context.
    const ParameterVector ctx = bundle_base(plan, bundle, bounds, out.params);
    std::vector<CascadeStage> local;
    bool need_training = false;
    for (const StageSpec* s : members) {
      const CascadeStage* hit = nullptr;
      for (const CascadeStage& c : reuse) {
        if (c.spec.name == s->name && same_on(c.context, ctx, bundle.conditioned)) hit = &c;
      }
      if (hit) {
        local.push_back(*hit);
      } else {
        need_training = true;
      }
    }
    if (need_training) {
      if (!config.allow_training) {
        throw ConfigError("bundle '" + name + "' has no trained stages for the current context");
      }
      local.clear();
      const BundleData data = generate_bundle_data(plan, name, bounds, ctx, bundle_seed(config.seed, name), config.data);
      if (data.failures() > 0) {
        out.warnings.push_back("bundle " + name + ": " + std::to_string(data.failures()) + " samples excluded");
      }
      for (const StageSpec* s : members) {
        local.push_back(train_stage(*s, data, bounds, stage_seed(config.seed, s->name), config.train));
      }
    }

    const Axis axis = default_axis(bundle.test);
    TieBreak tb = [&](double k3, double k4) {
      ParameterVector q = out.params;
      q[Param::k3] = k3;
      q[Param::k4] = k4;
      return curve_error(*curve, simulate_like(*curve, q, config.data.protocols), axis);
    };
    ParameterVector known = out.params;
    try {
      BundlePrediction bp = predict_bundle(plan, local, name, features, bounds, known, tb, &out.extrapolated);
      if (bp.coupled) out.coupled = std::move(bp.coupled);
    } catch (const ConvergenceError& e) {
      fallback(e.what());
      for (CascadeStage& c : local) out.stages.push_back(std::move(c));
      continue;
    }
    for (const StageSpec* s : members) {
      out.params[s->target] = known[s->target];
      out.source[index(s->target)] = Source::Stage;
    }
    for (CascadeStage& c : local) out.stages.push_back(std::move(c));
  }

  ParameterVector mid = bounds.midpoint();
  for (Param p : kAllParams) {
    if (auto v = plan.fixed.get(p)) mid[p] = *v;
  }
  for (const ResponseCurve& c : measured) {
    TestFit fit;
    fit.test = c.kind;
    fit.confinement = c.confinement;
    const Axis axis = default_axis(c.kind);
    try {
      fit.error = curve_error(c, simulate_like(c, out.params, config.data.protocols), axis);
      fit.midpoint_error = curve_error(c, simulate_like(c, mid, config.data.protocols), axis);
    } catch (const Error& e) {
      fit.failure = e.what();
    }
    out.fits.push_back(fit);
  }
  return out;
}

Identification validate(const PipelinePlan& plan, std::span<const ResponseCurve> measured,
                        std::span<const CascadeStage> stages, const IdentifyConfig& config) {
  IdentifyConfig cfg = config;
  cfg.allow_training = false;
  return identify(plan, measured, cfg, stages);
}

std::vector<ResponseCurve> synthetic_measurements(const ParameterVector& truth, const lab::Protocols& protocols) {
  std::vector<ResponseCurve> out;
  out.push_back(lab::run_uniaxial(truth, protocols.uniaxial));
  out.push_back(lab::run_hydrostatic(truth, protocols.hydrostatic));
  for (double s : protocols.triaxial.confinements) out.push_back(lab::run_triaxial(truth, s, protocols.triaxial));
  for (ResponseCurve& c : out) c.params.reset();
  return out;
}

std::vector<ClosedLoopRow> closed_loop(const PipelinePlan& plan, std::size_t n_truths, const IdentifyConfig& config,
                                       std::vector<CascadeStage>& cache) {
  std::vector<ClosedLoopRow> rows;
  Rng rng(derive_seed(config.seed, 0x54525554));
  for (std::size_t t = 0; t < n_truths; ++t) {
    ClosedLoopRow row;
    for (Param p : kAllParams) {
      const auto v = plan.fixed.get(p);
      row.truth[p] = v ? *v : rng.uniform(config.bounds[p].lo, config.bounds[p].hi);
    }
    const auto measured = synthetic_measurements(row.truth, config.data.protocols);
    row.result = identify(plan, measured, config, cache);
    for (const CascadeStage& s : row.result.stages) {
      const bool known = std::any_of(cache.begin(), cache.end(), [&](const CascadeStage& c) {
        return c.spec.name == s.spec.name && c.context == s.context;
      });
      if (!known) cache.push_back(s);
    }
    for (Param p : kAllParams) {
      row.error_pct[index(p)] =
          100.0 * std::abs(row.result.params[p] - row.truth[p]) / config.bounds[p].width();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mpcal::cascade
