#include "mpcal/neural.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "mpcal/error.hpp"

namespace mpcal::neural {

double logsig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double forward_normalized(const Topology& t, std::span<const double> w, std::span<const double> x) {
  const double* p = w.data();
  double out = 0.0;
  const double* wo = w.data() + (t.n_in + 1) * t.n_hidden;
  for (std::size_t j = 0; j < t.n_hidden; ++j) {
    double a = 0.0;
    for (std::size_t i = 0; i < t.n_in; ++i) a += p[i] * x[i];
    a += p[t.n_in];
    p += t.n_in + 1;
    out += wo[j] * logsig(a);
  }
  return logsig(out + wo[t.n_hidden]);
}

std::vector<Scaler> fit_scalers(const Dataset& data) {
  if (data.inputs.empty()) throw DataError("cannot fit scalers on an empty dataset");
  const std::size_t n_in = data.inputs.front().size();
  std::vector<Scaler> s(n_in, Scaler{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  for (const auto& row : data.inputs) {
    if (row.size() != n_in) throw DataError("ragged dataset rows");
    for (std::size_t i = 0; i < n_in; ++i) {
      s[i].min = std::min(s[i].min, row[i]);
      s[i].max = std::max(s[i].max, row[i]);
    }
  }
  for (Scaler& sc : s) {
    if (!(sc.max > sc.min)) {
      const double half = 0.5 * std::max(std::abs(sc.min), 1.0);
      const double c = sc.min;
      sc = {c - half, c + half};
    }
  }
  return s;
}

ScaledData scale(const Dataset& data, std::span<const Scaler> scalers, const Interval& target) {
  ScaledData out;
  out.n_in = scalers.size();
  out.x.reserve(data.size() * out.n_in);
  if (data.inputs.size() != data.targets.size()) throw DataError("dataset inputs and targets differ in count");
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (data.inputs[k].size() != out.n_in) throw DataError("dataset row width does not match scalers");
    for (std::size_t i = 0; i < out.n_in; ++i) out.x.push_back(scalers[i].apply(data.inputs[k][i]));
    out.t.push_back((data.targets[k] - target.lo) / target.width());
  }
  return out;
}

double training_error(const Topology& t, std::span<const double> w, const ScaledData& data) {
  double ss = 0.0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const double d = forward_normalized(t, w, data.row(k)) - data.t[k];
    ss += d * d;
  }
  return std::sqrt(ss);
}

void AnnModel::check() const {
  if (topology.n_in < 1 || topology.n_hidden < 1) throw ConfigError("model topology needs n_in >= 1 and n_hidden >= 1");
  if (weights.size() != topology.n_weights()) throw ConfigError("model weight count does not match topology");
  if (scalers.size() != topology.n_in) throw ConfigError("model scaler count does not match topology");
  for (const Scaler& s : scalers) {
    if (!(s.max > s.min)) throw ConfigError("model scaler with min >= max");
  }
  if (!(output.hi > output.lo)) throw ConfigError("model output interval is empty");
}

Prediction forward(const AnnModel& m, std::span<const double> raw) {
  if (raw.size() != m.topology.n_in) {
    std::ostringstream os;
    os << "model for " << m.target << " expects " << m.topology.n_in << " inputs, got " << raw.size();
    throw DataError(os.str());
  }
  Prediction p;
  std::vector<double> x(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    x[i] = m.scalers[i].apply(raw[i]);
    if (x[i] < 0.0 || x[i] > 1.0) p.extrapolated = true;
  }
  p.normalized = forward_normalized(m.topology, m.weights, x);
  p.value = m.output.lo + p.normalized * m.output.width();
  return p;
}

std::string model_to_json(const AnnModel& m) {
  nlohmann::ordered_json j;
  j["target"] = m.target;
  j["n_in"] = m.topology.n_in;
  j["n_hidden"] = m.topology.n_hidden;
  j["inputs"] = m.input_labels;
  nlohmann::ordered_json sc = nlohmann::ordered_json::array();
  for (const Scaler& s : m.scalers) sc.push_back({s.min, s.max});
  j["scalers"] = sc;
  j["output"] = {m.output.lo, m.output.hi};
  j["weights"] = m.weights;
  return j.dump(2);
}

AnnModel model_from_json(const std::string& text) {
  AnnModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.target = j.at("target").get<std::string>();
    m.topology.n_in = j.at("n_in").get<std::size_t>();
    m.topology.n_hidden = j.at("n_hidden").get<std::size_t>();
    m.input_labels = j.at("inputs").get<std::vector<std::string>>();
    for (const auto& s : j.at("scalers")) m.scalers.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    m.output = {j.at("output").at(0).get<double>(), j.at("output").at(1).get<double>()};
    m.weights = j.at("weights").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model file: ") + e.what());
  }
  m.check();
  return m;
}

void save_model(const std::filesystem::path& path, const AnnModel& m) {
  m.check();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model " + path.string());
  out << model_to_json(m) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

AnnModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read model " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

SizeSelection select_hidden_size(std::span<const std::size_t> candidates, std::size_t n_in, const ScaledData& train,
                                 const ScaledData& test, const Trainer& trainer) {
  if (candidates.empty()) throw ConfigError("select_hidden_size needs at least one candidate");
  SizeSelection sel;
  bool have = false;
  double best = 0.0;
  for (std::size_t h : candidates) {
    SizeTrial trial;
    trial.n_hidden = h;
    const Topology topo{n_in, h};
    try {
      trial.weights = trainer(topo, train);
      trial.train_error = training_error(topo, trial.weights, train);
      trial.test_error = test.size() > 0 ? training_error(topo, trial.weights, test) : trial.train_error;
    } catch (const Error& e) {
      trial.failure = e.what();
    }
    if (trial.failure.empty()) {
      const bool better = !have || trial.test_error < best ||
                          (trial.test_error == best && h < sel.chosen.n_hidden);
      if (better) {
        have = true;
        best = trial.test_error;
        sel.chosen = topo;
        sel.weights = trial.weights;
      }
    }
    sel.table.push_back(std::move(trial));
  }
  if (!have) throw ConvergenceError("every candidate hidden size failed to train");
  return sel;
}

}  // namespace mpcal::neural
