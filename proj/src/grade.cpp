#include "mpcal/grade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mpcal/error.hpp"
#include "mpcal/parallel.hpp"
#include "mpcal/random.hpp"

namespace mpcal::grade {
namespace {

constexpr std::uint64_t kInitTag = 0x494e4954;
constexpr std::uint64_t kSelectTag = 0x53454c;
constexpr std::uint64_t kRestartTag = 0x52535452;

using Point = std::vector<double>;

struct Ceraf {
  std::vector<CerafCenter> centers;
  double radius = 0.0;  // in normalized coordinates

  bool inside(const Point& y, const Box& box) const {
    for (const CerafCenter& c : centers) {
      double ss = 0.0;
      for (std::size_t k = 0; k < y.size(); ++k) {
        const double d = (y[k] - c.center[k]) / (box.hi[k] - box.lo[k]);
        ss += d * d;
      }
      if (std::sqrt(ss) < radius) return true;
    }
    return false;
  }
};

Point random_point(Rng& rng, const Box& box) {
  Point p(box.dims());
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = rng.uniform(box.lo[k], box.hi[k]);
  return p;
}

// Uniform point outside every radioactive ball, accepted anyway after the
// retry cap.
Point fresh_point(Rng& rng, const Box& box, const Ceraf& ceraf, std::size_t retry_cap) {
  Point p = random_point(rng, box);
  for (std::size_t t = 0; t < retry_cap && ceraf.inside(p, box); ++t) p = random_point(rng, box);
  return p;
}

Point make_child(Rng& rng, const std::vector<Point>& pop, const std::vector<double>& fit, const Box& box,
                 const GradeConfig& cfg) {
  const std::size_t n = pop.size();
  if (rng.bernoulli(cfg.p_mutation)) {
    const Point& x = pop[rng.index(n)];
    const Point z = random_point(rng, box);
    const double u = rng.uniform();
    Point y(x.size());
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] + u * (z[k] - x[k]);
    return y;
  }
  std::size_t i = rng.index(n);
  std::size_t j = rng.index(n - 1);
  if (j >= i) ++j;
  if (fit[j] < fit[i]) std::swap(i, j);
  const double u = cfg.cross_limit * rng.uniform();
  Point y(box.dims());
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = std::clamp(pop[i][k] + u * (pop[i][k] - pop[j][k]), box.lo[k], box.hi[k]);
  }
  return y;
}

}  // namespace

Box Box::uniform(std::size_t d, double lo, double hi) { return Box{std::vector<double>(d, lo), std::vector<double>(d, hi)}; }

void Box::check() const {
  if (lo.size() != hi.size() || lo.empty()) throw ConfigError("box bounds must be non-empty and of equal length");
  for (std::size_t k = 0; k < lo.size(); ++k) {
    if (!(std::isfinite(lo[k]) && std::isfinite(hi[k]) && lo[k] < hi[k])) {
      throw ConfigError("degenerate box in coordinate " + std::to_string(k));
    }
  }
}

OptimizeResult optimize(const Objective& f, const Box& box, std::size_t budget, std::uint64_t seed,
                        const GradeConfig& cfg) {
  box.check();
  const std::size_t P = cfg.population;
  if (P < 2) throw ConfigError("GRADE population must be at least 2");
  if (budget < P) throw ConfigError("evaluation budget smaller than the population");

  OptimizeResult res;
  Ceraf ceraf;
  ceraf.radius = cfg.radius * std::sqrt(static_cast<double>(box.dims()));

  auto evaluate = [&](const std::vector<Point>& pts, std::vector<double>& out) {
    out.assign(pts.size(), 0.0);
    parallel_for(pts.size(), cfg.jobs, [&](std::size_t s) { out[s] = f(pts[s]); });
    for (double& v : out) {
      if (!std::isfinite(v)) {
        v = std::numeric_limits<double>::infinity();
        ++res.non_finite;
      }
    }
    res.evals += pts.size();
  };

  std::vector<Point> pop(P);
  for (std::size_t s = 0; s < P; ++s) {
    Rng rng(derive_seed(seed, kInitTag, s));
    pop[s] = random_point(rng, box);
  }
  std::vector<double> fit;
  evaluate(pop, fit);

  auto best_index = [](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
  };
  std::size_t b0 = best_index(fit);
  res.best = pop[b0];
  res.best_value = fit[b0];
  double run_best = fit[b0];
  Point run_best_point = pop[b0];
  std::size_t stall = 0;
  res.history.push_back({0, res.best_value, res.evals});

  for (std::size_t g = 1; res.evals < budget; ++g) {
    const std::size_t n_child = std::min(P, budget - res.evals);
    std::vector<Point> kids(n_child);
    for (std::size_t s = 0; s < n_child; ++s) {
      Rng rng(derive_seed(seed, g, s));
      Point y = make_child(rng, pop, fit, box, cfg);
      for (std::size_t t = 0; t < cfg.retry_cap && ceraf.inside(y, box); ++t) y = make_child(rng, pop, fit, box, cfg);
      kids[s] = std::move(y);
    }
    std::vector<double> kid_fit;
    evaluate(kids, kid_fit);

    for (std::size_t s = 0; s < n_child; ++s) {
      if (kid_fit[s] < res.best_value) {
        res.best_value = kid_fit[s];
        res.best = kids[s];
      }
      if (kid_fit[s] < run_best) {
        run_best = kid_fit[s];
        run_best_point = kids[s];
        stall = 0;
      }
    }
    ++stall;

    // Pool parents and children; radioactive candidates go first, then
    // inverse tournaments trim the pool back to P.
    std::vector<Point> pool = std::move(pop);
    std::vector<double> pool_fit = std::move(fit);
    for (std::size_t s = 0; s < n_child; ++s) {
      pool.push_back(std::move(kids[s]));
      pool_fit.push_back(kid_fit[s]);
    }
    if (!ceraf.centers.empty()) {
      std::vector<std::size_t> hot;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (ceraf.inside(pool[k], box)) hot.push_back(k);
      }
      std::stable_sort(hot.begin(), hot.end(), [&](std::size_t a, std::size_t b) { return pool_fit[a] > pool_fit[b]; });
      const std::size_t removable = std::min(hot.size(), pool.size() - P);
      std::vector<bool> drop(pool.size(), false);
      for (std::size_t k = 0; k < removable; ++k) drop[hot[k]] = true;
      std::vector<Point> kept;
      std::vector<double> kept_fit;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (!drop[k]) {
          kept.push_back(std::move(pool[k]));
          kept_fit.push_back(pool_fit[k]);
        }
      }
      pool = std::move(kept);
      pool_fit = std::move(kept_fit);
    }
    Rng sel(derive_seed(seed, g, kSelectTag));
    while (pool.size() > P) {
      const std::size_t a = sel.index(pool.size());
      std::size_t b = sel.index(pool.size() - 1);
      if (b >= a) ++b;
      const std::size_t loser = pool_fit[a] > pool_fit[b] ? a : b;
      pool[loser] = std::move(pool.back());
      pool_fit[loser] = pool_fit.back();
      pool.pop_back();
      pool_fit.pop_back();
    }
    pop = std::move(pool);
    fit = std::move(pool_fit);
    res.generations = g;
    res.history.push_back({g, res.best_value, res.evals});

    if (cfg.stall_generations > 0 && stall >= cfg.stall_generations && budget - res.evals >= P) {
      ceraf.centers.push_back({run_best_point, run_best});
      for (std::size_t s = 0; s < P; ++s) {
        Rng rng(derive_seed(seed, g, kRestartTag + s));
        pop[s] = fresh_point(rng, box, ceraf, cfg.retry_cap);
      }
      evaluate(pop, fit);
      const std::size_t bi = best_index(fit);
      if (fit[bi] < res.best_value) {
        res.best_value = fit[bi];
        res.best = pop[bi];
      }
      run_best = fit[bi];
      run_best_point = pop[bi];
      stall = 0;
    }
  }
  res.centers = ceraf.centers;
  return res;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryEntry>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "generation,best,evals\n";
  char buf[32];
  for (const HistoryEntry& h : history) {
    std::snprintf(buf, sizeof buf, "%.17g", h.best);
    out << h.generation << ',' << buf << ',' << h.evals << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

OptimizeResult train_weights(const neural::Topology& topology, const neural::ScaledData& data, std::uint64_t seed,
                             const TrainConfig& config) {
  if (data.size() == 0) throw DataError("cannot train on an empty dataset");
  if (data.n_in != topology.n_in) throw ConfigError("dataset width does not match topology inputs");
  const Box box = Box::uniform(topology.n_weights(), -config.weight_bound, config.weight_bound);
  auto objective = [&](std::span<const double> w) { return neural::training_error(topology, w, data); };
  return optimize(objective, box, config.budget, seed, config.grade);
}

neural::AnnModel train_ann(const neural::Dataset& data, const neural::Topology& topology, const Interval& target,
                           std::uint64_t seed, const TrainConfig& config) {
  neural::AnnModel m;
  m.topology = topology;
  m.scalers = neural::fit_scalers(data);
  m.output = target;
  const neural::ScaledData scaled = neural::scale(data, m.scalers, target);
  m.weights = train_weights(topology, scaled, seed, config).best;
  m.check();
  return m;
}

}  // namespace mpcal::grade
