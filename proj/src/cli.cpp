#include "mpcal/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mpcal/error.hpp"
#include "mpcal/random.hpp"
#include "mpcal/sensa.hpp"

namespace mpcal::cli {
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using cascade::BundleData;
using cascade::CascadeStage;
using lab::TestKind;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v, const char* spec = "%.4g") {
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// E is configured in GPa and stored in MPa.
constexpr double kGPa = 1000.0;
double config_scale(Param p) { return p == Param::E ? kGPa : 1.0; }

// ---- strict JSON reading ----------------------------------------------

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(key_path(key) + ": expected a number");
    return v.get<double>();
  }
  std::uint64_t integer(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(key_path(key) + ": expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(key_path(key) + ": expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(key_path(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::optional<Section> sub(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return Section(j_.at(key), key_path(key));
  }

  void require(bool ok, const std::string& key, const std::string& what) const {
    if (!ok) throw ConfigError(key_path(key) + ": " + what);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown config key '" + key_path(it.key()) + "'");
    }
  }

  const json& raw() const { return j_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

Bounds read_bounds(Section s, const Bounds& def) {
  std::array<Interval, kNumParams> iv{};
  for (Param p : kAllParams) {
    const std::string key(param_name(p));
    iv[index(p)] = def[p];
    if (!s.has(key)) continue;
    const json& v = s.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      throw ConfigError(s.key_path(key) + ": expected [lo, hi]");
    }
    iv[index(p)] = {v[0].get<double>() * config_scale(p), v[1].get<double>() * config_scale(p)};
  }
  s.finish();
  return Bounds(iv);
}

FixedPolicy read_fixed(Section s) {
  FixedPolicy f;
  for (auto it = s.raw().begin(); it != s.raw().end(); ++it) {
    const Param p = param_from_name(it.key());
    const double v = s.number(it.key(), 0.0);
    f.fix(p, v * config_scale(p));
  }
  s.finish();
  return f;
}

void read_anneal(Section s, doe::AnnealConfig& a) {
  a.budget = s.integer("budget", a.budget);
  a.cooling = s.number("cooling", a.cooling);
  s.require(a.cooling > 0.0 && a.cooling < 1.0, "cooling", "must lie in (0, 1)");
  a.cooling_interval = s.integer("cooling_interval", a.cooling_interval);
  s.require(a.cooling_interval > 0, "cooling_interval", "must be positive");
  a.calibration_proposals = s.integer("calibration_proposals", a.calibration_proposals);
  s.finish();
}

void read_design(Section s, PipelineConfig& c) {
  c.data.n_train = s.integer("n_train", c.data.n_train);
  s.require(c.data.n_train >= 3, "n_train", "needs at least 3 samples");
  c.data.n_test = s.integer("n_test", c.data.n_test);
  s.require(c.data.n_test >= 1, "n_test", "needs at least 1 sample");
  c.data.max_failure_fraction = s.number("max_failure_fraction", c.data.max_failure_fraction);
  s.require(c.data.max_failure_fraction >= 0.0 && c.data.max_failure_fraction <= 1.0, "max_failure_fraction",
            "must lie in [0, 1]");
  c.screening_samples = s.integer("screening_samples", c.screening_samples);
  s.require(c.screening_samples >= 3, "screening_samples", "needs at least 3 samples");
  if (auto a = s.sub("anneal")) read_anneal(*a, c.data.anneal);
  s.finish();
}

void read_training(Section s, grade::TrainConfig& t) {
  t.budget = s.integer("budget", t.budget);
  s.require(t.budget > 0, "budget", "must be positive");
  t.weight_bound = s.number("weight_bound", t.weight_bound);
  s.require(t.weight_bound > 0.0, "weight_bound", "must be positive");
  auto& g = t.grade;
  g.population = s.integer("population", g.population);
  s.require(g.population >= 4, "population", "needs at least 4 members");
  g.p_mutation = s.number("p_mutation", g.p_mutation);
  s.require(g.p_mutation >= 0.0 && g.p_mutation <= 1.0, "p_mutation", "must lie in [0, 1]");
  g.cross_limit = s.number("cross_limit", g.cross_limit);
  s.require(g.cross_limit > 0.0, "cross_limit", "must be positive");
  g.stall_generations = s.integer("stall_generations", g.stall_generations);
  s.require(g.stall_generations > 0, "stall_generations", "must be positive");
  g.radius = s.number("radius", g.radius);
  s.require(g.radius >= 0.0, "radius", "must not be negative");
  g.retry_cap = s.integer("retry_cap", g.retry_cap);
  s.finish();
}

std::string_view variant_name(cascade::K3Variant v) {
  return v == cascade::K3Variant::FiveInput ? "five-input" : "four-input";
}

void read_plan(Section s, PipelineConfig& c) {
  const std::string v = s.string("k3_variant", std::string(variant_name(c.k3_variant)));
  if (v == "five-input") {
    c.k3_variant = cascade::K3Variant::FiveInput;
  } else if (v == "four-input") {
    c.k3_variant = cascade::K3Variant::FourInput;
  } else {
    throw ConfigError(s.key_path("k3_variant") + ": expected \"five-input\" or \"four-input\"");
  }
  c.plan = cascade::build_default_plan(c.k3_variant);
  if (auto stages = s.sub("stages")) {
    for (auto it = stages->raw().begin(); it != stages->raw().end(); ++it) {
      const std::string& name = it.key();
      auto found = std::find_if(c.plan.stages.begin(), c.plan.stages.end(),
                                [&](const cascade::StageSpec& st) { return st.name == name; });
      if (found == c.plan.stages.end()) throw ConfigError("unknown stage '" + stages->key_path(name) + "'");
      Section st = *stages->sub(name);
      found->n_hidden = st.integer("hidden", found->n_hidden);
      st.require(found->n_hidden >= 1, "hidden", "needs at least 1 neuron");
      if (st.has("features")) {
        const json& fj = st.at("features");
        if (!fj.is_array() || fj.empty()) throw ConfigError(st.key_path("features") + ": expected a non-empty list");
        found->features.clear();
        for (const json& f : fj) {
          if (!f.is_string()) throw ConfigError(st.key_path("features") + ": expected feature labels");
          found->features.push_back(lab::FeatureSpec::parse(f.get<std::string>()));
        }
      }
      st.finish();
    }
    stages->finish();
  }
  s.finish();
}

void read_protocols(Section s, lab::Protocols& p) {
  if (auto u = s.sub("uniaxial")) {
    p.uniaxial.eps_max = u->number("eps_max", p.uniaxial.eps_max);
    u->require(p.uniaxial.eps_max > 0.0, "eps_max", "must be positive");
    p.uniaxial.n_steps = static_cast<int>(u->integer("n_steps", static_cast<std::uint64_t>(p.uniaxial.n_steps)));
    u->require(p.uniaxial.n_steps >= 1, "n_steps", "must be positive");
    p.uniaxial.tol_lat = u->number("tol_lat", p.uniaxial.tol_lat);
    u->require(p.uniaxial.tol_lat > 0.0, "tol_lat", "must be positive");
    p.uniaxial.max_iter = static_cast<int>(u->integer("max_iter", static_cast<std::uint64_t>(p.uniaxial.max_iter)));
    u->finish();
  }
  if (auto h = s.sub("hydrostatic")) {
    if (h->has("peak_pressure")) {
      const json& v = h->at("peak_pressure");
      if (v.is_null()) {
        p.hydrostatic.peak_pressure.reset();
      } else if (v.is_number() && v.get<double>() > 0.0) {
        p.hydrostatic.peak_pressure = v.get<double>();
      } else {
        throw ConfigError(h->key_path("peak_pressure") + ": expected a positive number or null");
      }
    }
    p.hydrostatic.eps_max = h->number("eps_max", p.hydrostatic.eps_max);
    h->require(p.hydrostatic.eps_max > 0.0, "eps_max", "must be positive");
    p.hydrostatic.n_steps =
        static_cast<int>(h->integer("n_steps", static_cast<std::uint64_t>(p.hydrostatic.n_steps)));
    h->require(p.hydrostatic.n_steps >= 1, "n_steps", "must be positive");
    p.hydrostatic.unload = h->boolean("unload", p.hydrostatic.unload);
    p.hydrostatic.unload_fraction = h->number("unload_fraction", p.hydrostatic.unload_fraction);
    h->require(p.hydrostatic.unload_fraction >= 0.0 && p.hydrostatic.unload_fraction < 1.0, "unload_fraction",
               "must lie in [0, 1)");
    p.hydrostatic.n_unload_steps =
        static_cast<int>(h->integer("n_unload_steps", static_cast<std::uint64_t>(p.hydrostatic.n_unload_steps)));
    h->require(p.hydrostatic.n_unload_steps >= 2, "n_unload_steps", "needs at least 2 steps");
    h->finish();
  }
  if (auto t = s.sub("triaxial")) {
    if (t->has("confinements")) {
      const json& v = t->at("confinements");
      if (!v.is_array() || v.empty()) throw ConfigError(t->key_path("confinements") + ": expected a non-empty list");
      p.triaxial.confinements.clear();
      for (const json& x : v) {
        if (!x.is_number() || !(x.get<double>() > 0.0)) {
          throw ConfigError(t->key_path("confinements") + ": expected positive pressures");
        }
        p.triaxial.confinements.push_back(x.get<double>());
      }
    }
    p.triaxial.eps_max = t->number("eps_max", p.triaxial.eps_max);
    t->require(p.triaxial.eps_max > 0.0, "eps_max", "must be positive");
    p.triaxial.n_steps = static_cast<int>(t->integer("n_steps", static_cast<std::uint64_t>(p.triaxial.n_steps)));
    t->require(p.triaxial.n_steps >= 1, "n_steps", "must be positive");
    p.triaxial.tol_lat = t->number("tol_lat", p.triaxial.tol_lat);
    t->require(p.triaxial.tol_lat > 0.0, "tol_lat", "must be positive");
    p.triaxial.max_iter = static_cast<int>(t->integer("max_iter", static_cast<std::uint64_t>(p.triaxial.max_iter)));
    p.triaxial.hydro_scan_max = t->number("hydro_scan_max", p.triaxial.hydro_scan_max);
    t->require(p.triaxial.hydro_scan_max > 0.0, "hydro_scan_max", "must be positive");
    t->finish();
  }
  s.finish();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

void read_measured(Section s, MeasuredFiles& m, const fs::path& base) {
  if (s.has("uniaxial")) m.uniaxial = resolve(base, s.string("uniaxial", ""));
  if (s.has("hydrostatic")) m.hydrostatic = resolve(base, s.string("hydrostatic", ""));
  if (s.has("triaxial")) {
    const json& v = s.at("triaxial");
    if (!v.is_array()) throw ConfigError(s.key_path("triaxial") + ": expected a list");
    m.triaxial.clear();
    for (const json& e : v) {
      Section t(e, s.key_path("triaxial[]"));
      const double conf = t.number("confinement", 0.0);
      t.require(conf > 0.0, "confinement", "must be positive");
      t.require(t.has("file"), "file", "is required");
      m.triaxial.emplace_back(conf, resolve(base, t.string("file", "")));
      t.finish();
    }
  }
  s.finish();
}

json bounds_json(const Bounds& b) {
  json j;
  for (Param p : kAllParams) {
    const double k = config_scale(p);
    j[std::string(param_name(p))] = json::array({b[p].lo / k, b[p].hi / k});
  }
  return j;
}

json fixed_json(const FixedPolicy& f) {
  json j = json::object();
  for (Param p : kAllParams) {
    if (auto v = f.get(p)) j[std::string(param_name(p))] = *v / config_scale(p);
  }
  return j;
}

json config_json(const PipelineConfig& c) {
  json j;
  j["output_dir"] = c.output_dir.generic_string();
  j["seed"] = c.seed;
  j["bounds"] = bounds_json(c.bounds);
  j["fixed"] = fixed_json(c.plan.fixed);
  json d;
  d["n_train"] = c.data.n_train;
  d["n_test"] = c.data.n_test;
  d["max_failure_fraction"] = c.data.max_failure_fraction;
  d["screening_samples"] = c.screening_samples;
  d["anneal"] = {{"budget", c.data.anneal.budget},
                 {"cooling", c.data.anneal.cooling},
                 {"cooling_interval", c.data.anneal.cooling_interval},
                 {"calibration_proposals", c.data.anneal.calibration_proposals}};
  j["design"] = d;
  const auto& g = c.train.grade;
  j["training"] = {{"budget", c.train.budget},       {"weight_bound", c.train.weight_bound},
                   {"population", g.population},     {"p_mutation", g.p_mutation},
                   {"cross_limit", g.cross_limit},   {"stall_generations", g.stall_generations},
                   {"radius", g.radius},             {"retry_cap", g.retry_cap}};
  json stages = json::object();
  for (const cascade::StageSpec& s : c.plan.stages) {
    json f = json::array();
    for (const lab::FeatureSpec& x : s.features) f.push_back(x.label());
    stages[s.name] = {{"hidden", s.n_hidden}, {"features", f}};
  }
  j["plan"] = {{"k3_variant", variant_name(c.k3_variant)}, {"stages", stages}};
  const auto& pr = c.data.protocols;
  json hydro = {{"peak_pressure", nullptr},
                {"eps_max", pr.hydrostatic.eps_max},
                {"n_steps", pr.hydrostatic.n_steps},
                {"unload", pr.hydrostatic.unload},
                {"unload_fraction", pr.hydrostatic.unload_fraction},
                {"n_unload_steps", pr.hydrostatic.n_unload_steps}};
  if (pr.hydrostatic.peak_pressure) hydro["peak_pressure"] = *pr.hydrostatic.peak_pressure;
  j["protocols"] = {{"uniaxial",
                     {{"eps_max", pr.uniaxial.eps_max},
                      {"n_steps", pr.uniaxial.n_steps},
                      {"tol_lat", pr.uniaxial.tol_lat},
                      {"max_iter", pr.uniaxial.max_iter}}},
                    {"hydrostatic", hydro},
                    {"triaxial",
                     {{"confinements", pr.triaxial.confinements},
                      {"eps_max", pr.triaxial.eps_max},
                      {"n_steps", pr.triaxial.n_steps},
                      {"tol_lat", pr.triaxial.tol_lat},
                      {"max_iter", pr.triaxial.max_iter},
                      {"hydro_scan_max", pr.triaxial.hydro_scan_max}}}};
  json m = json::object();
  if (c.measured.uniaxial) m["uniaxial"] = c.measured.uniaxial->generic_string();
  if (c.measured.hydrostatic) m["hydrostatic"] = c.measured.hydrostatic->generic_string();
  if (!c.measured.triaxial.empty()) {
    json t = json::array();
    for (const auto& [conf, file] : c.measured.triaxial) t.push_back({{"confinement", conf}, {"file", file.generic_string()}});
    m["triaxial"] = t;
  }
  j["measured"] = m;
  j["verify"] = {{"closed_loop_truths", c.closed_loop_truths}};
  return j;
}

// ---- files --------------------------------------------------------------

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file(const fs::path& path) { return hex64(fnv1a(read_text(path))); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const fs::path& file) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(file.string() + ": bad number '" + s + "'");
  }
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

// ---- manifest -----------------------------------------------------------

// Records, per pipeline step, a key over its configuration and inputs and the
// hashes of the files it wrote.
class Manifest {
 public:
  explicit Manifest(fs::path root) : root_(std::move(root)), path_(root_ / "manifest.json") {
    if (fs::exists(path_)) {
      j_ = read_json(path_);
      if (!j_.contains("steps") || !j_["steps"].is_object()) throw DataError("malformed manifest " + path_.string());
    } else {
      j_ = {{"steps", json::object()}};
    }
  }

  std::string rel(const fs::path& p) const { return p.lexically_relative(root_).generic_string(); }

  std::optional<std::pair<std::string, std::string>> producer(const std::string& rel_path) const {
    for (auto it = j_["steps"].begin(); it != j_["steps"].end(); ++it) {
      const json& outs = it.value()["outputs"];
      if (outs.contains(rel_path)) return std::make_pair(it.key(), outs[rel_path].get<std::string>());
    }
    return std::nullopt;
  }

  void check_inputs(const std::vector<fs::path>& inputs, bool force) const {
    for (const fs::path& p : inputs) {
      const std::string r = rel(p);
      if (!fs::exists(p)) throw DataError("missing input " + r + "; run the step that produces it first");
      if (force) continue;
      const auto prod = producer(r);
      if (!prod) throw DataError("input " + r + " is not recorded in the manifest; rerun its step or pass --force");
      const std::string now = hash_file(p);
      if (now != prod->second) {
        throw DataError("stale manifest: " + r + " changed since step '" + prod->first + "' wrote it (recorded " +
                        prod->second + ", found " + now + "); rerun that step or pass --force");
      }
    }
  }

  bool up_to_date(const std::string& step, const std::string& key) const {
    const json& steps = j_["steps"];
    if (!steps.contains(step) || steps[step]["key"] != key) return false;
    const json& outs = steps[step]["outputs"];
    for (auto it = outs.begin(); it != outs.end(); ++it) {
      const fs::path p = root_ / it.key();
      if (!fs::exists(p) || hash_file(p) != it.value().get<std::string>()) return false;
    }
    return true;
  }

  void record(const std::string& step, const std::string& key, std::vector<fs::path> outputs) {
    std::sort(outputs.begin(), outputs.end());
    json outs = json::object();
    for (const fs::path& p : outputs) outs[rel(p)] = hash_file(p);
    j_["steps"][step] = {{"key", key}, {"outputs", outs}};
    write_json(path_, j_);
  }

 private:
  fs::path root_;
  fs::path path_;
  json j_;
};

// ---- run context ----------------------------------------------------------

struct Options {
  std::string config;
  std::string out;
  unsigned jobs = 1;
  bool force = false;
  std::optional<std::size_t> budget;
};

struct Context {
  PipelineConfig cfg;
  json canonical;
  fs::path root;
  std::unique_ptr<Manifest> manifest;
  bool force = false;
};

json config_part(const Context& ctx, std::initializer_list<const char*> keys) {
  json j;
  for (const char* k : keys) j[k] = ctx.canonical[k];
  return j;
}

// Runs `body` unless the step's key and outputs are unchanged. `extra` files
// enter the key but are not manifest-checked (measured curves).
bool run_step(Context& ctx, const std::string& name, const json& part, const std::vector<fs::path>& inputs,
              const std::vector<fs::path>& extra, const std::function<std::vector<fs::path>()>& body) {
  ctx.manifest->check_inputs(inputs, ctx.force);
  std::string material = name + "\n" + part.dump() + "\n";
  for (const fs::path& p : inputs) material += ctx.manifest->rel(p) + ":" + hash_file(p) + "\n";
  for (const fs::path& p : extra) {
    if (!fs::exists(p)) throw IoError("cannot read " + p.string());
    material += p.generic_string() + ":" + hash_file(p) + "\n";
  }
  const std::string key = hex64(fnv1a(material));
  if (!ctx.force && ctx.manifest->up_to_date(name, key)) {
    std::cout << name << ": up to date\n";
    return false;
  }
  ctx.manifest->record(name, key, body());
  return true;
}

ParameterVector training_context(const PipelineConfig& c) { return midpoint_fill(c.plan.fixed, c.bounds); }

std::vector<std::string> bundle_names(const PipelineConfig& c, const std::vector<std::string>& selected) {
  std::vector<std::string> out;
  for (const cascade::BundleSpec& b : c.plan.bundles) {
    if (selected.empty() || std::find(selected.begin(), selected.end(), b.name) != selected.end()) out.push_back(b.name);
  }
  for (const std::string& s : selected) c.plan.bundle(s);
  return out;
}

std::vector<std::string> stage_names(const PipelineConfig& c, const std::vector<std::string>& selected) {
  std::vector<std::string> out;
  for (const cascade::StageSpec& s : c.plan.stages) {
    if (selected.empty() || std::find(selected.begin(), selected.end(), s.name) != selected.end()) out.push_back(s.name);
  }
  for (const std::string& s : selected) c.plan.stage(s);
  return out;
}

fs::path design_path(const Context& ctx, const std::string& b, doe::Role r) {
  return ctx.root / "designs" / (b + "_" + std::string(doe::role_name(r)) + ".csv");
}
fs::path design_sidecar(const fs::path& p) { return fs::path(p.string() + ".json"); }
fs::path bundle_dir(const Context& ctx, const std::string& b) { return ctx.root / "bundles" / b; }
fs::path samples_path(const Context& ctx, const std::string& b) { return bundle_dir(ctx, b) / "samples.csv"; }
fs::path curve_path(const Context& ctx, const std::string& b, doe::Role r, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03zu.csv", i);
  return bundle_dir(ctx, b) / "curves" / (std::string(doe::role_name(r)) + buf);
}
fs::path model_path(const Context& ctx, const std::string& s) { return ctx.root / "models" / (s + ".json"); }
fs::path train_report_path(const Context& ctx, const std::string& s) {
  return ctx.root / "reports" / ("train_" + s + ".json");
}

std::vector<std::string> param_columns() {
  std::vector<std::string> out;
  for (Param p : kAllParams) out.emplace_back(param_name(p));
  return out;
}

std::vector<std::string> varied_names(const cascade::BundleSpec& b) {
  std::vector<std::string> out;
  for (Param p : b.varied) out.emplace_back(param_name(p));
  return out;
}

json params_json(const ParameterVector& p) {
  json j;
  for (Param q : kAllParams) j[std::string(param_name(q))] = p[q];
  return j;
}

ParameterVector params_from_json(const json& j, const fs::path& file) {
  ParameterVector p;
  for (Param q : kAllParams) {
    const std::string k(param_name(q));
    if (!j.contains(k) || !j[k].is_number()) throw DataError(file.string() + ": missing parameter " + k);
    p[q] = j[k].get<double>();
  }
  return p;
}

// ---- bundle files ---------------------------------------------------------

void write_samples(const fs::path& path, const BundleData& data) {
  std::ostringstream out;
  out << "role,index";
  for (const auto& n : param_columns()) out << ',' << n;
  for (const auto& f : data.features) out << ',' << f.label();
  out << ",failure\n";
  for (doe::Role role : {doe::Role::Train, doe::Role::Test}) {
    const auto& recs = role == doe::Role::Train ? data.train : data.test;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const cascade::SampleRecord& r = recs[i];
      out << doe::role_name(role) << ',' << i;
      for (Param p : kAllParams) out << ',' << fmt(r.params[p]);
      for (std::size_t f = 0; f < data.features.size(); ++f) out << ',' << (r.ok() ? fmt(r.features[f]) : "");
      out << ',' << one_line(r.failure) << '\n';
    }
  }
  write_text(path, out.str());
}

std::optional<double> bundle_confinement(const PipelineConfig& c, const cascade::BundleSpec& b) {
  if (b.test != TestKind::Triaxial) return std::nullopt;
  return cascade::stage_confinement(c.data.protocols);
}

BundleData load_bundle(const Context& ctx, const std::string& name, bool with_curves) {
  const PipelineConfig& c = ctx.cfg;
  const cascade::BundleSpec& bundle = c.plan.bundle(name);
  BundleData data;
  data.bundle = name;
  data.context = cascade::bundle_base(c.plan, bundle, c.bounds, training_context(c));
  data.features = c.plan.bundle_features(name);
  data.train_design = doe::read_design(design_path(ctx, name, doe::Role::Train));
  data.test_design = doe::read_design(design_path(ctx, name, doe::Role::Test));

  const fs::path path = samples_path(ctx, name);
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  std::vector<std::string> want = {"role", "index"};
  for (const auto& n : param_columns()) want.push_back(n);
  for (const auto& f : data.features) want.push_back(f.label());
  want.emplace_back("failure");
  if (split_csv(line) != want) {
    throw DataError(path.string() + " was written for a different feature set; rerun simulate");
  }
  const std::size_t nf = data.features.size();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != want.size()) throw DataError(path.string() + ": wrong column count");
    cascade::SampleRecord r;
    for (std::size_t j = 0; j < kNumParams; ++j) r.params[kAllParams[j]] = parse_number(cells[2 + j], path);
    r.failure = cells.back();
    if (r.ok()) {
      for (std::size_t f = 0; f < nf; ++f) r.features.push_back(parse_number(cells[2 + kNumParams + f], path));
    }
    const doe::Role role = doe::role_from_name(cells[0]);
    (role == doe::Role::Train ? data.train : data.test).push_back(std::move(r));
  }
  if (data.train.size() != data.train_design.samples() || data.test.size() != data.test_design.samples()) {
    throw DataError(path.string() + " does not match the design files; rerun simulate");
  }
  if (with_curves) {
    const auto conf = bundle_confinement(c, bundle);
    for (doe::Role role : {doe::Role::Train, doe::Role::Test}) {
      const auto& recs = role == doe::Role::Train ? data.train : data.test;
      auto& curves = role == doe::Role::Train ? data.train_curves : data.test_curves;
      for (std::size_t i = 0; i < recs.size(); ++i) {
        lab::ResponseCurve rc;
        rc.kind = bundle.test;
        if (recs[i].ok()) {
          rc = cascade::read_curve_csv(curve_path(ctx, name, role, i), bundle.test, conf);
          rc.params = recs[i].params;
        }
        curves.push_back(std::move(rc));
      }
    }
  }
  return data;
}

// Curve files of a bundle as recorded by its simulate step.
std::vector<fs::path> recorded_curves(const Context& ctx, const std::string& name) {
  const json m = read_json(ctx.root / "manifest.json");
  std::vector<fs::path> out;
  const std::string step = "simulate:" + name;
  if (!m["steps"].contains(step)) throw DataError("bundle '" + name + "' has not been simulated; run simulate first");
  const json& outs = m["steps"][step]["outputs"];
  for (auto it = outs.begin(); it != outs.end(); ++it) {
    if (it.key().find("/curves/") != std::string::npos) out.push_back(ctx.root / it.key());
  }
  return out;
}

// ---- stages ---------------------------------------------------------------

json errors_json(const cascade::ErrorReport& r) {
  auto summary = [](const cascade::ErrorSummary& s) { return json{{"max_pct", s.max_pct}, {"avg_pct", s.avg_pct}}; };
  return {{"interval_width", r.width},
          {"train", summary(r.train)},
          {"test", summary(r.test)},
          {"train_abs", r.train_abs},
          {"test_abs", r.test_abs}};
}

json stage_json(const CascadeStage& s, std::uint64_t run_seed) {
  json j;
  j["stage"] = s.spec.name;
  j["target"] = std::string(param_name(s.spec.target));
  j["bundle"] = s.spec.bundle;
  j["inputs"] = s.spec.input_labels();
  j["topology"] = {s.spec.topology().n_in, s.spec.topology().n_hidden};
  j["run_seed"] = run_seed;
  j["seed"] = s.seed;
  j["budget"] = s.budget;
  j["samples"] = {{"train", s.report.train_abs.size()}, {"test", s.report.test_abs.size()}};
  j["context"] = params_json(s.context);
  j["errors"] = errors_json(s.report);
  return j;
}

CascadeStage load_stage(const Context& ctx, const std::string& name) {
  CascadeStage s;
  s.spec = ctx.cfg.plan.stage(name);
  s.model = neural::load_model(model_path(ctx, name));
  if (s.model.input_labels != s.spec.input_labels() || s.model.topology.n_hidden != s.spec.n_hidden) {
    throw DataError("model for stage '" + name + "' does not match the plan; retrain it");
  }
  const fs::path rp = train_report_path(ctx, name);
  const json j = read_json(rp);
  s.context = params_from_json(j.at("context"), rp);
  s.seed = j.at("seed").get<std::uint64_t>();
  s.budget = j.at("budget").get<std::size_t>();
  const json& e = j.at("errors");
  s.report.width = e.at("interval_width").get<double>();
  s.report.train_abs = e.at("train_abs").get<std::vector<double>>();
  s.report.test_abs = e.at("test_abs").get<std::vector<double>>();
  s.report.train = cascade::summarize_errors(s.report.train_abs, s.report.width);
  s.report.test = cascade::summarize_errors(s.report.test_abs, s.report.width);
  return s;
}

std::vector<fs::path> stage_files(const Context& ctx) {
  std::vector<fs::path> out;
  for (const cascade::StageSpec& s : ctx.cfg.plan.stages) {
    out.push_back(model_path(ctx, s.name));
    out.push_back(train_report_path(ctx, s.name));
  }
  return out;
}

std::vector<CascadeStage> load_stages(const Context& ctx) {
  std::vector<CascadeStage> out;
  for (const cascade::StageSpec& s : ctx.cfg.plan.stages) out.push_back(load_stage(ctx, s.name));
  return out;
}

cascade::IdentifyConfig identify_config(const PipelineConfig& c, bool allow_training) {
  cascade::IdentifyConfig ic;
  ic.bounds = c.bounds;
  ic.data = c.data;
  ic.train = c.train;
  ic.seed = c.seed;
  ic.allow_training = allow_training;
  return ic;
}

std::string test_label(TestKind kind, std::optional<double> confinement) {
  std::string s(lab::test_kind_name(kind));
  if (confinement) s += "_" + fmt_short(*confinement, "%g");
  return s;
}

// ---- subcommands ------------------------------------------------------------

void cmd_sample(Context& ctx, const std::vector<std::string>& selected) {
  const PipelineConfig& c = ctx.cfg;
  for (const std::string& name : bundle_names(c, selected)) {
    const cascade::BundleSpec& b = c.plan.bundle(name);
    run_step(ctx, "sample:" + name, config_part(ctx, {"seed", "bounds", "fixed", "design", "plan"}), {}, {}, [&] {
      const auto d = cascade::make_bundle_designs(c.plan, name, cascade::bundle_seed(c.seed, name), c.data);
      const fs::path tr = design_path(ctx, name, doe::Role::Train);
      const fs::path te = design_path(ctx, name, doe::Role::Test);
      fs::create_directories(tr.parent_path());
      doe::write_design(tr, d.train, varied_names(b), {c.data.anneal.budget, d.objective});
      doe::write_design(te, d.test, varied_names(b), {0, doe::max_abs_correlation(d.test)});
      std::cout << "sample " << name << ": " << d.train.samples() << " train rows (max |r| "
                << fmt_short(d.initial_objective) << " -> " << fmt_short(d.objective) << "), " << d.test.samples()
                << " test rows\n";
      return std::vector<fs::path>{tr, design_sidecar(tr), te, design_sidecar(te)};
    });
  }
}

void cmd_simulate(Context& ctx, const std::vector<std::string>& selected, unsigned& warnings) {
  const PipelineConfig& c = ctx.cfg;
  for (const std::string& name : bundle_names(c, selected)) {
    const fs::path tr = design_path(ctx, name, doe::Role::Train);
    const fs::path te = design_path(ctx, name, doe::Role::Test);
    const std::vector<fs::path> inputs = {tr, design_sidecar(tr), te, design_sidecar(te)};
    run_step(ctx, "simulate:" + name, config_part(ctx, {"seed", "bounds", "fixed", "design", "plan", "protocols"}),
             inputs, {}, [&] {
               cascade::BundleDesigns d;
               d.train = doe::read_design(tr);
               d.test = doe::read_design(te);
               const BundleData data =
                   cascade::simulate_bundle(c.plan, name, c.bounds, training_context(c), d, c.data);
               fs::remove_all(bundle_dir(ctx, name) / "curves");
               fs::create_directories(bundle_dir(ctx, name) / "curves");
               std::vector<fs::path> outs;
               for (doe::Role role : {doe::Role::Train, doe::Role::Test}) {
                 const auto& recs = role == doe::Role::Train ? data.train : data.test;
                 const auto& curves = role == doe::Role::Train ? data.train_curves : data.test_curves;
                 for (std::size_t i = 0; i < recs.size(); ++i) {
                   if (!recs[i].ok()) {
                     ++warnings;
                     std::cerr << "warning: " << name << " " << doe::role_name(role) << " sample " << i << ": "
                               << recs[i].failure << "\n";
                     continue;
                   }
                   outs.push_back(curve_path(ctx, name, role, i));
                   cascade::write_curve_csv(outs.back(), curves[i]);
                 }
               }
               write_samples(samples_path(ctx, name), data);
               outs.push_back(samples_path(ctx, name));
               const std::size_t n = data.train.size() + data.test.size();
               std::cout << "simulate " << name << ": " << n - data.failures() << " of " << n << " curves\n";
               return outs;
             });
  }
}

void write_ranking(const fs::path& path, const sensa::SensitivityProfile& prof) {
  std::ostringstream out;
  out << "rank,parameter,max_abs_r,initial_r\n";
  std::size_t rank = 1;
  for (std::size_t j : prof.ranking()) {
    const sensa::Correlation& first = prof.r[j].front();
    out << rank++ << ',' << prof.names[j] << ',' << fmt(prof.max_abs(j)) << ','
        << (first.no_signal ? "nan" : fmt(first.r)) << '\n';
  }
  write_text(path, out.str());
}

void print_ranking(const std::string& title, const sensa::SensitivityProfile& prof) {
  std::cout << title << ":";
  for (std::size_t j : prof.ranking()) std::cout << " " << prof.names[j] << " " << fmt_short(prof.max_abs(j), "%.3f");
  std::cout << "\n";
}

void cmd_sensitivity(Context& ctx, const std::vector<std::string>& selected, bool screen, unsigned jobs) {
  const PipelineConfig& c = ctx.cfg;
  const fs::path dir = ctx.root / "sensitivity";
  for (const std::string& name : bundle_names(c, selected)) {
    const cascade::BundleSpec& b = c.plan.bundle(name);
    std::vector<fs::path> inputs = {samples_path(ctx, name)};
    for (doe::Role r : {doe::Role::Train, doe::Role::Test}) {
      inputs.push_back(design_path(ctx, name, r));
      inputs.push_back(design_sidecar(design_path(ctx, name, r)));
    }
    const auto curves_in = recorded_curves(ctx, name);
    inputs.insert(inputs.end(), curves_in.begin(), curves_in.end());
    run_step(ctx, "sensitivity:" + name, config_part(ctx, {"seed", "bounds", "fixed", "design", "plan", "protocols"}),
             inputs, {}, [&] {
               const BundleData data = load_bundle(ctx, name, true);
               std::vector<std::size_t> rows;
               std::vector<lab::ResponseCurve> curves;
               std::vector<std::size_t> peak_rows;
               std::vector<lab::Peak> peaks;
               for (std::size_t i = 0; i < data.train.size(); ++i) {
                 if (!data.train[i].ok()) continue;
                 rows.push_back(i);
                 curves.push_back(data.train_curves[i]);
                 if (b.test == TestKind::Hydrostatic) continue;
                 try {
                   peaks.push_back(lab::find_peak(data.train_curves[i]));
                   peak_rows.push_back(i);
                 } catch (const DataError&) {
                 }
               }
               const auto grid = sensa::profile_grid(b.test, c.data.protocols);
               const auto prof = sensa::sensitivity_profile(data.train_design, rows, curves, grid,
                                                            sensa::response_for(b.test), varied_names(b));
               fs::create_directories(dir);
               std::vector<fs::path> outs = {dir / (name + "_profile.csv"), dir / (name + "_ranking.csv")};
               sensa::write_profile_csv(outs[0], prof);
               write_ranking(outs[1], prof);
               if (peaks.size() >= 3) {
                 outs.push_back(dir / (name + "_peaks.csv"));
                 sensa::write_peaks_csv(outs.back(), varied_names(b),
                                        sensa::peak_sensitivity(data.train_design, peak_rows, peaks));
               }
               print_ranking("sensitivity " + name, prof);
               return outs;
             });
  }
  if (!screen) return;
  for (TestKind kind : {TestKind::Uniaxial, TestKind::Hydrostatic, TestKind::Triaxial}) {
    const std::string test(lab::test_kind_name(kind));
    run_step(ctx, "screen:" + test, config_part(ctx, {"seed", "bounds", "design", "protocols"}), {}, {}, [&] {
      sensa::ScreeningConfig sc;
      sc.n_samples = c.screening_samples;
      sc.anneal = c.data.anneal;
      sc.protocols = c.data.protocols;
      sc.jobs = jobs;
      const auto s = sensa::screen(kind, sensa::screening_bounds(c.bounds), derive_seed(c.seed, fnv1a("screen:" + test)), sc);
      for (const std::string& f : s.failures) std::cerr << "warning: screening " << test << " " << f << "\n";
      fs::create_directories(dir);
      std::vector<fs::path> outs = {dir / ("screen_" + test + "_profile.csv"), dir / ("screen_" + test + "_ranking.csv")};
      sensa::write_profile_csv(outs[0], s.profile);
      write_ranking(outs[1], s.profile);
      if (s.peaks) {
        outs.push_back(dir / ("screen_" + test + "_peaks.csv"));
        sensa::write_peaks_csv(outs.back(), s.profile.names, *s.peaks);
      }
      print_ranking("screening " + test, s.profile);
      return outs;
    });
  }
}

void cmd_train(Context& ctx, const std::vector<std::string>& selected) {
  const PipelineConfig& c = ctx.cfg;
  for (const std::string& name : stage_names(c, selected)) {
    const cascade::StageSpec& spec = c.plan.stage(name);
    const std::vector<fs::path> inputs = {samples_path(ctx, spec.bundle)};
    run_step(ctx, "train:" + name,
             config_part(ctx, {"seed", "bounds", "fixed", "design", "plan", "protocols", "training"}), inputs, {}, [&] {
               const BundleData data = load_bundle(ctx, spec.bundle, false);
               const CascadeStage s =
                   cascade::train_stage(spec, data, c.bounds, cascade::stage_seed(c.seed, name), c.train);
               fs::create_directories(ctx.root / "models");
               neural::save_model(model_path(ctx, name), s.model);
               write_json(train_report_path(ctx, name), stage_json(s, c.seed));
               std::cout << "train " << name << ": train max " << fmt_short(s.report.train.max_pct, "%.2f") << "% avg "
                         << fmt_short(s.report.train.avg_pct, "%.2f") << "%, test max "
                         << fmt_short(s.report.test.max_pct, "%.2f") << "% avg "
                         << fmt_short(s.report.test.avg_pct, "%.2f") << "% (seed " << s.seed << ", budget "
                         << s.budget << ")\n";
               return std::vector<fs::path>{model_path(ctx, name), train_report_path(ctx, name)};
             });
  }
}

std::vector<lab::ResponseCurve> read_measured(const MeasuredFiles& m, std::vector<fs::path>& files) {
  std::vector<lab::ResponseCurve> out;
  if (m.uniaxial) {
    out.push_back(cascade::read_curve_csv(*m.uniaxial, TestKind::Uniaxial));
    files.push_back(*m.uniaxial);
  }
  if (m.hydrostatic) {
    out.push_back(cascade::read_curve_csv(*m.hydrostatic, TestKind::Hydrostatic));
    files.push_back(*m.hydrostatic);
  }
  for (const auto& [conf, file] : m.triaxial) {
    out.push_back(cascade::read_curve_csv(file, TestKind::Triaxial, conf));
    files.push_back(file);
  }
  if (out.empty()) throw ConfigError("no measured curves configured (measured section or --uniaxial/--hydrostatic/--triaxial)");
  return out;
}

void write_fits(const fs::path& path, const std::vector<cascade::TestFit>& fits, const std::string& prefix_header = {},
                const std::string& prefix = {}) {
  std::ostringstream out;
  out << prefix_header << "test,confinement,error,midpoint_error,failure\n";
  for (const cascade::TestFit& f : fits) {
    out << prefix << lab::test_kind_name(f.test) << ',' << (f.confinement ? fmt(*f.confinement) : "") << ','
        << (f.failure.empty() ? fmt(f.error) : "") << ',' << (f.failure.empty() ? fmt(f.midpoint_error) : "") << ','
        << one_line(f.failure) << '\n';
  }
  write_text(path, out.str());
}

json identification_json(const cascade::Identification& id, const PipelineConfig& c) {
  json j;
  j["run_seed"] = c.seed;
  j["training_budget"] = c.train.budget;
  json params = json::array();
  for (Param p : kAllParams) {
    params.push_back({{"parameter", std::string(param_name(p))},
                      {"value", id.params[p]},
                      {"source", std::string(cascade::source_name(id.source[index(p)]))},
                      {"in_bounds", c.bounds[p].contains(id.params[p])}});
  }
  j["parameters"] = params;
  j["warnings"] = id.warnings;
  j["extrapolated_stages"] = id.extrapolated;
  json fits = json::array();
  for (const cascade::TestFit& f : id.fits) {
    json fj = {{"test", std::string(lab::test_kind_name(f.test))},
               {"confinement", f.confinement ? json(*f.confinement) : json(nullptr)}};
    if (f.failure.empty()) {
      fj["error"] = f.error;
      fj["midpoint_error"] = f.midpoint_error;
    } else {
      fj["failure"] = f.failure;
    }
    fits.push_back(fj);
  }
  j["fits"] = fits;
  if (id.coupled) {
    json roots = json::array();
    for (const cascade::CoupledRoot& r : id.coupled->roots) {
      json rj = {{"k3", r.k3}, {"k4", r.k4}, {"residual", r.residual}};
      if (r.curve_error) rj["curve_error"] = *r.curve_error;
      roots.push_back(rj);
    }
    j["coupled"] = {{"selected", id.coupled->selected}, {"roots", roots}};
  }
  json stages = json::array();
  for (const CascadeStage& s : id.stages) {
    stages.push_back({{"stage", s.spec.name},
                      {"seed", s.seed},
                      {"budget", s.budget},
                      {"context", params_json(s.context)},
                      {"test_max_pct", s.report.test.max_pct},
                      {"test_avg_pct", s.report.test.avg_pct}});
  }
  j["stages"] = stages;
  return j;
}

void cmd_identify(Context& ctx, const MeasuredFiles& measured, bool allow_training) {
  const PipelineConfig& c = ctx.cfg;
  std::vector<fs::path> files;
  const auto curves = read_measured(measured, files);
  const fs::path dir = ctx.root / "identify";
  run_step(ctx, "identify", config_part(ctx, {"seed", "bounds", "fixed", "design", "plan", "protocols", "training"}),
           stage_files(ctx), files, [&] {
             const auto stages = load_stages(ctx);
             const cascade::Identification id = cascade::identify(c.plan, curves, identify_config(c, allow_training), stages);
             fs::remove_all(dir);
             fs::create_directories(dir / "curves");
             std::vector<fs::path> outs;

             std::ostringstream pt;
             pt << "parameter,value,source,in_bounds\n";
             for (Param p : kAllParams) {
               pt << param_name(p) << ',' << fmt(id.params[p]) << ',' << cascade::source_name(id.source[index(p)])
                  << ',' << (c.bounds[p].contains(id.params[p]) ? 1 : 0) << '\n';
             }
             outs.push_back(dir / "parameters.csv");
             write_text(outs.back(), pt.str());
             outs.push_back(dir / "fits.csv");
             write_fits(outs.back(), id.fits);
             outs.push_back(dir / "report.json");
             write_json(outs.back(), identification_json(id, c));

             if (id.coupled) {
               std::ostringstream rel;
               rel << "relation,k3,k4\n";
               for (const auto& [k3, k4] : id.coupled->k4_relation) rel << "k4_of_k3," << fmt(k3) << ',' << fmt(k4) << '\n';
               for (const auto& [k3, k4] : id.coupled->k3_relation) rel << "k3_of_k4," << fmt(k3) << ',' << fmt(k4) << '\n';
               outs.push_back(dir / "k3k4_relations.csv");
               write_text(outs.back(), rel.str());
               std::ostringstream roots;
               roots << "k3,k4,residual,curve_error,selected\n";
               for (std::size_t i = 0; i < id.coupled->roots.size(); ++i) {
                 const cascade::CoupledRoot& r = id.coupled->roots[i];
                 roots << fmt(r.k3) << ',' << fmt(r.k4) << ',' << fmt(r.residual) << ','
                       << (r.curve_error ? fmt(*r.curve_error) : "") << ',' << (i == id.coupled->selected ? 1 : 0)
                       << '\n';
               }
               outs.push_back(dir / "k3k4_roots.csv");
               write_text(outs.back(), roots.str());
             }
             for (const CascadeStage& s : id.stages) {
               if (s.context == load_stage(ctx, s.spec.name).context) continue;
               fs::create_directories(dir / "models");
               outs.push_back(dir / "models" / (s.spec.name + ".json"));
               neural::save_model(outs.back(), s.model);
             }
             for (const lab::ResponseCurve& m : curves) {
               try {
                 const lab::ResponseCurve sim = lab::simulate(m.kind, id.params, c.data.protocols, m.confinement);
                 outs.push_back(dir / "curves" / (test_label(m.kind, m.confinement) + "_identified.csv"));
                 cascade::write_curve_csv(outs.back(), sim);
               } catch (const Error& e) {
                 std::cerr << "warning: re-simulation of " << test_label(m.kind, m.confinement) << " failed: " << e.what()
                           << "\n";
               }
             }

             for (const std::string& w : id.warnings) std::cerr << "warning: " << w << "\n";
             for (Param p : kAllParams) {
               std::cout << "  " << param_name(p) << " = " << fmt_short(id.params[p], "%.6g") << "  ("
                         << cascade::source_name(id.source[index(p)])
                         << (c.bounds[p].contains(id.params[p]) ? "" : ", outside bounds") << ")\n";
             }
             for (const std::string& s : id.extrapolated) std::cout << "  stage " << s << " extrapolated\n";
             for (const cascade::TestFit& f : id.fits) {
               std::cout << "  fit " << test_label(f.test, f.confinement) << ": ";
               if (f.failure.empty()) {
                 std::cout << fmt_short(f.error) << " (midpoint " << fmt_short(f.midpoint_error) << ")\n";
               } else {
                 std::cout << "failed: " << f.failure << "\n";
               }
             }
             return outs;
           });
}

void cmd_verify(Context& ctx, std::size_t truths) {
  const PipelineConfig& c = ctx.cfg;
  std::vector<fs::path> inputs = stage_files(ctx);
  for (const cascade::BundleSpec& b : c.plan.bundles) {
    inputs.push_back(samples_path(ctx, b.name));
    for (doe::Role r : {doe::Role::Train, doe::Role::Test}) {
      inputs.push_back(design_path(ctx, b.name, r));
      inputs.push_back(design_sidecar(design_path(ctx, b.name, r)));
    }
    const auto curves = recorded_curves(ctx, b.name);
    inputs.insert(inputs.end(), curves.begin(), curves.end());
  }
  json part = config_part(ctx, {"seed", "bounds", "fixed", "design", "plan", "protocols", "training"});
  part["closed_loop_truths"] = truths;
  const fs::path dir = ctx.root / "verify";
  run_step(ctx, "verify", part, inputs, {}, [&] {
    const auto stages = load_stages(ctx);
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<fs::path> outs;
    json report;
    report["run_seed"] = c.seed;
    report["training_budget"] = c.train.budget;

    json resim = json::object();
    for (const cascade::BundleSpec& b : c.plan.bundles) {
      const BundleData data = load_bundle(ctx, b.name, true);
      const auto rows = cascade::verify_resimulation(c.plan, stages, data, c.bounds, c.data.protocols);
      std::ostringstream out;
      out << "sample";
      for (const auto& n : param_columns()) out << ',' << n << "_true";
      for (const auto& n : param_columns()) out << ',' << n << "_predicted";
      out << ",error,failure\n";
      double sum = 0.0, mx = 0.0;
      std::size_t ok = 0;
      for (const cascade::ResimulationRow& r : rows) {
        out << r.sample;
        for (Param p : kAllParams) out << ',' << fmt(r.truth[p]);
        for (Param p : kAllParams) out << ',' << fmt(r.predicted[p]);
        out << ',' << (r.failure.empty() ? fmt(r.error) : "") << ',' << one_line(r.failure) << '\n';
        if (r.failure.empty()) {
          sum += r.error;
          mx = std::max(mx, r.error);
          ++ok;
        }
      }
      outs.push_back(dir / ("resimulation_" + b.name + ".csv"));
      write_text(outs.back(), out.str());
      resim[b.name] = {{"samples", rows.size()},
                       {"failed", rows.size() - ok},
                       {"mean_error", ok ? sum / static_cast<double>(ok) : 0.0},
                       {"max_error", mx}};
      std::cout << "verify " << b.name << ": re-simulation error mean " << fmt_short(ok ? sum / ok : 0.0) << ", max "
                << fmt_short(mx) << " over " << ok << " test samples\n";
    }
    report["resimulation"] = resim;

    if (truths > 0) {
      std::vector<CascadeStage> cache = stages;
      const auto rows = cascade::closed_loop(c.plan, truths, identify_config(c, true), cache);
      std::ostringstream par, fit;
      par << "truth,parameter,true,identified,error_pct\n";
      fit << "truth,test,confinement,error,midpoint_error,failure\n";
      std::array<double, kNumParams> worst{};
      std::size_t fits_total = 0, fits_better = 0;
      json truths_json = json::array();
      for (std::size_t t = 0; t < rows.size(); ++t) {
        const auto& r = rows[t];
        for (Param p : kAllParams) {
          par << t << ',' << param_name(p) << ',' << fmt(r.truth[p]) << ',' << fmt(r.result.params[p]) << ','
              << fmt(r.error_pct[index(p)]) << '\n';
          worst[index(p)] = std::max(worst[index(p)], r.error_pct[index(p)]);
        }
        for (const cascade::TestFit& f : r.result.fits) {
          fit << t << ',' << lab::test_kind_name(f.test) << ',' << (f.confinement ? fmt(*f.confinement) : "") << ','
              << (f.failure.empty() ? fmt(f.error) : "") << ',' << (f.failure.empty() ? fmt(f.midpoint_error) : "")
              << ',' << one_line(f.failure) << '\n';
          ++fits_total;
          if (f.failure.empty() && f.error < f.midpoint_error) ++fits_better;
        }
        truths_json.push_back({{"truth", params_json(r.truth)},
                               {"identified", params_json(r.result.params)},
                               {"warnings", r.result.warnings}});
      }
      outs.push_back(dir / "closed_loop.csv");
      write_text(outs.back(), par.str());
      outs.push_back(dir / "closed_loop_fits.csv");
      write_text(outs.back(), fit.str());
      json worst_json;
      for (Param p : kAllParams) worst_json[std::string(param_name(p))] = worst[index(p)];
      report["closed_loop"] = {{"truths", truths},
                               {"truth_seed", derive_seed(c.seed, 0x54525554)},
                               {"max_error_pct", worst_json},
                               {"fits", fits_total},
                               {"fits_better_than_midpoint", fits_better},
                               {"runs", truths_json}};
      std::cout << "verify closed loop (" << truths << " truths): max error";
      for (Param p : kAllParams) std::cout << " " << param_name(p) << " " << fmt_short(worst[index(p)], "%.2f") << "%";
      std::cout << "; " << fits_better << " of " << fits_total << " fits beat the midpoint\n";
    }
    outs.push_back(dir / "report.json");
    write_json(outs.back(), report);
    return outs;
  });
}

void cmd_report(Context& ctx) {
  const PipelineConfig& c = ctx.cfg;
  std::vector<fs::path> inputs;
  for (const cascade::StageSpec& s : c.plan.stages) inputs.push_back(train_report_path(ctx, s.name));
  const fs::path id_report = ctx.root / "identify" / "report.json";
  const fs::path verify_report = ctx.root / "verify" / "report.json";
  for (const fs::path& p : {id_report, verify_report}) {
    if (fs::exists(p)) inputs.push_back(p);
  }
  std::vector<fs::path> rankings;
  if (fs::exists(ctx.root / "sensitivity")) {
    for (const auto& e : fs::directory_iterator(ctx.root / "sensitivity")) {
      const std::string n = e.path().filename().string();
      if (n.size() > 12 && n.compare(n.size() - 12, 12, "_ranking.csv") == 0) rankings.push_back(e.path());
    }
  }
  std::sort(rankings.begin(), rankings.end());
  inputs.insert(inputs.end(), rankings.begin(), rankings.end());

  run_step(ctx, "report", json::object(), inputs, {}, [&] {
    std::ostringstream md;
    md << "# Calibration report\n\n";
    md << "Run seed " << c.seed << ", training budget " << c.train.budget << " evaluations, designs "
       << c.data.n_train << "/" << c.data.n_test << ".\n\n";
    md << "## Stage verification (% of interval)\n\n";
    md << "| stage | inputs | hidden | train max | train avg | test max | test avg | seed |\n";
    md << "|---|---|---|---|---|---|---|---|\n";
    for (const cascade::StageSpec& s : c.plan.stages) {
      const json j = read_json(train_report_path(ctx, s.name));
      const json& e = j["errors"];
      std::string ins;
      for (const auto& x : j["inputs"]) ins += (ins.empty() ? "" : ", ") + x.get<std::string>();
      md << "| " << s.name << " | " << ins << " | " << s.n_hidden << " | "
         << fmt_short(e["train"]["max_pct"].get<double>(), "%.2f") << " | "
         << fmt_short(e["train"]["avg_pct"].get<double>(), "%.2f") << " | "
         << fmt_short(e["test"]["max_pct"].get<double>(), "%.2f") << " | "
         << fmt_short(e["test"]["avg_pct"].get<double>(), "%.2f") << " | " << j["seed"].get<std::uint64_t>()
         << " |\n";
    }
    if (!rankings.empty()) {
      md << "\n## Sensitivity (max |r|)\n\n";
      for (const fs::path& p : rankings) {
        std::istringstream in(read_text(p));
        std::string line;
        std::getline(in, line);
        std::string name = p.filename().string();
        name.resize(name.size() - 12);
        md << "- " << name << ":";
        while (std::getline(in, line)) {
          const auto cells = split_csv(line);
          if (cells.size() >= 3) md << " " << cells[1] << " " << fmt_short(parse_number(cells[2], p), "%.3f");
        }
        md << "\n";
      }
    }
    if (fs::exists(id_report)) {
      const json j = read_json(id_report);
      md << "\n## Identification\n\n| parameter | value | source |\n|---|---|---|\n";
      for (const auto& p : j["parameters"]) {
        md << "| " << p["parameter"].get<std::string>() << " | " << fmt_short(p["value"].get<double>(), "%.6g")
           << (p["in_bounds"].get<bool>() ? "" : " (outside bounds)") << " | " << p["source"].get<std::string>()
           << " |\n";
      }
      md << "\n| test | error | midpoint error |\n|---|---|---|\n";
      for (const auto& f : j["fits"]) {
        std::string t = f["test"].get<std::string>();
        if (!f["confinement"].is_null()) t += " " + fmt_short(f["confinement"].get<double>(), "%g") + " MPa";
        if (f.contains("failure")) {
          md << "| " << t << " | failed | |\n";
        } else {
          md << "| " << t << " | " << fmt_short(f["error"].get<double>()) << " | "
             << fmt_short(f["midpoint_error"].get<double>()) << " |\n";
        }
      }
      for (const auto& w : j["warnings"]) md << "\n- warning: " << w.get<std::string>();
      if (!j["warnings"].empty()) md << "\n";
    }
    if (fs::exists(verify_report)) {
      const json j = read_json(verify_report);
      md << "\n## Re-simulation of test samples (curve error)\n\n| bundle | mean | max | failed |\n|---|---|---|---|\n";
      for (auto it = j["resimulation"].begin(); it != j["resimulation"].end(); ++it) {
        md << "| " << it.key() << " | " << fmt_short(it.value()["mean_error"].get<double>()) << " | "
           << fmt_short(it.value()["max_error"].get<double>()) << " | " << it.value()["failed"].get<std::size_t>()
           << " |\n";
      }
      if (j.contains("closed_loop")) {
        const json& cl = j["closed_loop"];
        md << "\n## Closed loop (" << cl["truths"].get<std::size_t>() << " truths)\n\n| parameter | max error % |\n|---|---|\n";
        for (auto it = cl["max_error_pct"].begin(); it != cl["max_error_pct"].end(); ++it) {
          md << "| " << it.key() << " | " << fmt_short(it.value().get<double>(), "%.2f") << " |\n";
        }
        md << "\n" << cl["fits_better_than_midpoint"].get<std::size_t>() << " of " << cl["fits"].get<std::size_t>()
           << " re-simulated curves fit better than the midpoint vector.\n";
      }
    }
    const fs::path out = ctx.root / "report.md";
    write_text(out, md.str());
    std::cout << "report: " << out.string() << "\n";
    return std::vector<fs::path>{out};
  });
}

void cmd_synthesize(const PipelineConfig& c, const std::vector<std::string>& assignments, const fs::path& dir) {
  ParameterVector truth = midpoint_fill(c.plan.fixed, c.bounds);
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("--param expects NAME=VALUE, got '" + a + "'");
    const Param p = param_from_name(a.substr(0, eq));
    double v = 0.0;
    try {
      v = std::stod(a.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("--param: bad value in '" + a + "'");
    }
    truth[p] = v * config_scale(p);
  }
  if (!truth.is_physical()) throw ConfigError("synthetic parameter vector is not physically admissible");
  fs::create_directories(dir);
  json measured;
  json tri = json::array();
  for (const lab::ResponseCurve& m : cascade::synthetic_measurements(truth, c.data.protocols)) {
    const std::string file = test_label(m.kind, m.confinement) + ".csv";
    cascade::write_curve_csv(dir / file, m);
    if (m.kind == TestKind::Triaxial) {
      tri.push_back({{"confinement", *m.confinement}, {"file", file}});
    } else {
      measured[std::string(lab::test_kind_name(m.kind))] = file;
    }
    std::cout << "wrote " << (dir / file).string() << "\n";
  }
  measured["triaxial"] = tri;
  write_json(dir / "truth.json", params_json(truth));
  write_json(dir / "measured.json", {{"measured", measured}});
}

}  // namespace

// ---- public API -------------------------------------------------------------

PipelineConfig config_from_json(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section s(j, "");
  PipelineConfig c;
  if (s.has("output_dir")) c.output_dir = resolve(base_dir, s.string("output_dir", ""));
  c.seed = s.integer("seed", c.seed);
  if (auto b = s.sub("bounds")) c.bounds = read_bounds(*b, c.bounds);
  if (auto p = s.sub("plan")) read_plan(*p, c);
  if (auto f = s.sub("fixed")) {
    c.plan.fixed = read_fixed(*f);
  }
  if (auto d = s.sub("design")) read_design(*d, c);
  if (auto t = s.sub("training")) read_training(*t, c.train);
  if (auto p = s.sub("protocols")) read_protocols(*p, c.data.protocols);
  if (auto m = s.sub("measured")) read_measured(*m, c.measured, base_dir);
  if (auto v = s.sub("verify")) {
    c.closed_loop_truths = v->integer("closed_loop_truths", c.closed_loop_truths);
    v->finish();
  }
  s.finish();
  c.plan.check();
  return c;
}

PipelineConfig load_config(const fs::path& path) { return config_from_json(read_text(path), path.parent_path()); }

std::string config_to_json(const PipelineConfig& config) { return config_json(config).dump(2) + "\n"; }

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const ConvergenceError*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e)) return 5;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 5;
  return 1;
}

int run(int argc, char** argv) {
  CLI::App app{"Microplane parameter calibration with cascade neural networks"};
  app.require_subcommand(0, 0);
  app.fallthrough();
  Options opt;
  bool print_config = false;
  app.add_option("-c,--config", opt.config, "JSON config file (defaults apply when omitted)");
  app.add_option("-o,--out", opt.out, "output directory (overrides the config)");
  app.add_option("-j,--jobs", opt.jobs, "worker threads for simulation and training")->check(CLI::PositiveNumber);
  app.add_flag("-f,--force", opt.force, "run even when outputs are up to date or inputs are stale");
  app.add_option("--budget", opt.budget, "training budget in objective evaluations")->check(CLI::PositiveNumber);
  app.add_flag("--print-config", print_config, "print the effective config and exit");

  std::vector<std::string> bundles, stages;
  auto* sample = app.add_subcommand("sample", "write train and test designs");
  sample->add_option("-b,--bundle", bundles, "bundles to sample (default all)");
  auto* simulate = app.add_subcommand("simulate", "simulate every design row of the bundles");
  simulate->add_option("-b,--bundle", bundles, "bundles to simulate (default all)");
  bool screen = false;
  auto* sensitivity = app.add_subcommand("sensitivity", "correlation profiles of the simulated bundles");
  sensitivity->add_option("-b,--bundle", bundles, "bundles to analyse (default all)");
  sensitivity->add_flag("--screen", screen, "also run seven-parameter screening bundles for each test");
  auto* train = app.add_subcommand("train", "train stage networks");
  train->add_option("-s,--stage", stages, "stages to train (default all)");
  MeasuredFiles cli_measured;
  std::string uni, hyd;
  std::vector<std::string> tri;
  bool no_retrain = false;
  auto* identify = app.add_subcommand("identify", "identify parameters from measured curves");
  identify->add_option("--uniaxial", uni, "measured uniaxial curve CSV");
  identify->add_option("--hydrostatic", hyd, "measured hydrostatic curve CSV");
  identify->add_option("--triaxial", tri, "measured triaxial curve as PRESSURE=FILE");
  identify->add_flag("--no-retrain", no_retrain, "fail instead of retraining conditioned bundles");
  std::optional<std::size_t> truths;
  auto* verify = app.add_subcommand("verify", "re-simulation of test samples and closed-loop identification");
  verify->add_option("--truths", truths, "number of closed-loop truth vectors (0 skips)");
  auto* report = app.add_subcommand("report", "collect reports into report.md");
  std::vector<std::string> assignments;
  std::string synth_dir = "measured";
  auto* synthesize = app.add_subcommand("synthesize", "write synthetic measured curves for a known parameter vector");
  synthesize->add_option("-p,--param", assignments, "parameter value as NAME=VALUE (E in GPa); others at midpoints");
  synthesize->add_option("-d,--dir", synth_dir, "directory for the curve files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    Context ctx;
    ctx.cfg = opt.config.empty() ? PipelineConfig{} : load_config(opt.config);
    if (!opt.out.empty()) ctx.cfg.output_dir = opt.out;
    if (opt.budget) ctx.cfg.train.budget = *opt.budget;
    ctx.cfg.data.jobs = opt.jobs;
    ctx.cfg.train.grade.jobs = opt.jobs;
    if (print_config) {
      std::cout << config_to_json(ctx.cfg);
      return 0;
    }
    if (app.get_subcommands().empty()) throw ConfigError("no subcommand given; run with --help");
    if (*synthesize) {
      cmd_synthesize(ctx.cfg, assignments, synth_dir);
      return 0;
    }
    ctx.canonical = config_json(ctx.cfg);
    ctx.root = ctx.cfg.output_dir;
    ctx.force = opt.force;
    fs::create_directories(ctx.root);
    ctx.manifest = std::make_unique<Manifest>(ctx.root);

    unsigned warnings = 0;
    if (*sample) cmd_sample(ctx, bundles);
    if (*simulate) cmd_simulate(ctx, bundles, warnings);
    if (*sensitivity) cmd_sensitivity(ctx, bundles, screen, opt.jobs);
    if (*train) cmd_train(ctx, stages);
    if (*identify) {
      MeasuredFiles m = ctx.cfg.measured;
      if (!uni.empty()) m.uniaxial = fs::path(uni);
      if (!hyd.empty()) m.hydrostatic = fs::path(hyd);
      if (!tri.empty()) {
        m.triaxial.clear();
        for (const std::string& t : tri) {
          const auto eq = t.find('=');
          if (eq == std::string::npos) throw ConfigError("--triaxial expects PRESSURE=FILE, got '" + t + "'");
          double conf = 0.0;
          try {
            conf = std::stod(t.substr(0, eq));
          } catch (const std::exception&) {
            throw ConfigError("--triaxial: bad pressure in '" + t + "'");
          }
          m.triaxial.emplace_back(conf, fs::path(t.substr(eq + 1)));
        }
      }
      cmd_identify(ctx, m, !no_retrain);
    }
    if (*verify) cmd_verify(ctx, truths.value_or(ctx.cfg.closed_loop_truths));
    if (*report) cmd_report(ctx);
    if (warnings > 0) std::cerr << warnings << " warning(s)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace mpcal::cli
