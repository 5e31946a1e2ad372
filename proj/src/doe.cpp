#include "mpcal/doe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "mpcal/error.hpp"
#include "mpcal/random.hpp"

namespace mpcal::doe {
namespace {

double abs_corr(const DesignSet& d, std::size_t a, std::size_t b) {
  const std::size_t n = d.samples();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += d(i, a);
    mb += d(i, b);
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xa = d(i, a) - ma;
    const double xb = d(i, b) - mb;
    sab += xa * xb;
    saa += xa * xa;
    sbb += xb * xb;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::abs(sab) / std::sqrt(saa * sbb);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::filesystem::path sidecar(const std::filesystem::path& p) { return p.string() + ".json"; }

}  // namespace

std::string_view role_name(Role r) { return r == Role::Train ? "train" : "test"; }

Role role_from_name(std::string_view name) {
  if (name == "train") return Role::Train;
  if (name == "test") return Role::Test;
  throw ConfigError("unknown design role '" + std::string(name) + "'");
}

DesignSet::DesignSet(std::size_t n, std::size_t d, Role role, std::uint64_t seed)
    : n_(n), d_(d), role_(role), seed_(seed), data_(n * d, 0.0) {}

std::vector<double> DesignSet::column(std::size_t j) const {
  std::vector<double> c(n_);
  for (std::size_t i = 0; i < n_; ++i) c[i] = (*this)(i, j);
  return c;
}

DesignSet lhs_sample(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n < 2 || d < 1) throw ConfigError("lhs_sample needs n >= 2 and d >= 1");
  DesignSet out(n, d, Role::Train, seed);
  Rng rng(derive_seed(seed, 0x4c4853));
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 0; j < d; ++j) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    for (std::size_t i = 0; i < n; ++i) {
      out(i, j) = (static_cast<double>(perm[i]) + 0.5) / static_cast<double>(n);
    }
  }
  return out;
}

DesignSet random_sample(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n < 1 || d < 1) throw ConfigError("random_sample needs n >= 1 and d >= 1");
  DesignSet out(n, d, Role::Test, seed);
  Rng rng(derive_seed(seed, 0x524e44));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = rng.uniform();
  }
  return out;
}

double max_abs_correlation(const DesignSet& design) {
  double worst = 0.0;
  for (std::size_t a = 0; a < design.dims(); ++a) {
    for (std::size_t b = a + 1; b < design.dims(); ++b) worst = std::max(worst, abs_corr(design, a, b));
  }
  return worst;
}

AnnealResult anneal_decorrelate(const DesignSet& design, std::uint64_t seed, const AnnealConfig& config) {
  if (design.role() != Role::Train) throw ConfigError("anneal_decorrelate expects a train (LHS) design");
  AnnealResult res;
  res.design = design;
  res.initial_objective = res.final_objective = max_abs_correlation(design);
  const std::size_t n = design.samples();
  const std::size_t d = design.dims();
  if (config.budget == 0 || d < 2 || n < 2) return res;

  Rng rng(derive_seed(seed, 0x5341));
  struct Move {
    std::size_t col, a, b;
  };
  auto propose = [&] {
    Move m{rng.index(d), rng.index(n), rng.index(n - 1)};
    if (m.b >= m.a) ++m.b;
    return m;
  };
  auto apply = [](DesignSet& ds, const Move& m) { std::swap(ds(m.a, m.col), ds(m.b, m.col)); };

  DesignSet current = design;
  double current_obj = res.initial_objective;

  // Temperature from the spread of objective changes of random moves.
  std::vector<double> deltas;
  for (std::size_t k = 0; k < config.calibration_proposals; ++k) {
    const Move m = propose();
    apply(current, m);
    deltas.push_back(max_abs_correlation(current) - current_obj);
    apply(current, m);
  }
  double temperature = 0.0;
  if (deltas.size() > 1) {
    const double mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
    double ss = 0.0;
    for (double x : deltas) ss += (x - mean) * (x - mean);
    temperature = std::sqrt(ss / static_cast<double>(deltas.size() - 1));
  }

  for (std::size_t k = 0; k < config.budget; ++k) {
    const Move m = propose();
    apply(current, m);
    const double obj = max_abs_correlation(current);
    const double delta = obj - current_obj;
    const double u = rng.uniform();
    const bool accept = delta <= 0.0 || (temperature > 0.0 && u < std::exp(-delta / temperature));
    if (accept) {
      current_obj = obj;
      ++res.accepted;
      if (obj < res.final_objective) {
        res.final_objective = obj;
        res.design = current;
      }
    } else {
      apply(current, m);
    }
    ++res.proposals;
    if (config.cooling_interval > 0 && (k + 1) % config.cooling_interval == 0) temperature *= config.cooling;
  }
  return res;
}

void write_design(const std::filesystem::path& path, const DesignSet& design,
                  const std::vector<std::string>& column_names, const DesignMeta& meta) {
  if (column_names.size() != design.dims()) throw ConfigError("design column names do not match dimension");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write design file " + path.string());
  for (std::size_t j = 0; j < column_names.size(); ++j) out << (j ? "," : "") << column_names[j];
  out << '\n';
  for (std::size_t i = 0; i < design.samples(); ++i) {
    for (std::size_t j = 0; j < design.dims(); ++j) out << (j ? "," : "") << fmt(design(i, j));
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());

  nlohmann::ordered_json side;
  side["role"] = role_name(design.role());
  side["seed"] = design.seed();
  side["samples"] = design.samples();
  side["dims"] = design.dims();
  side["budget"] = meta.budget;
  side["max_abs_correlation"] = meta.objective;
  std::ofstream sc(sidecar(path));
  if (!sc) throw IoError("cannot write " + sidecar(path).string());
  sc << side.dump(2) << '\n';
}

DesignSet read_design(const std::filesystem::path& path) {
  std::ifstream side_in(sidecar(path));
  if (!side_in) throw IoError("missing design sidecar " + sidecar(path).string());
  nlohmann::json side;
  try {
    side_in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad design sidecar " + sidecar(path).string() + ": " + e.what());
  }
  std::ifstream in(path);
  if (!in) throw IoError("cannot read design file " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("bad number '" + cell + "' in " + path.string());
      }
    }
    rows.push_back(std::move(row));
  }
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  DesignSet out(rows.size(), d, role_from_name(side.at("role").get<std::string>()), side.at("seed").get<std::uint64_t>());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw DataError("ragged design file " + path.string());
    for (std::size_t j = 0; j < d; ++j) out(i, j) = rows[i][j];
  }
  return out;
}

}  // namespace mpcal::doe
