#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mpcal/cli.hpp"
#include "mpcal/error.hpp"

using namespace mpcal;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mpcal");
  std::vector<char*> argv;
  for (std::string& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config round-trips through its canonical form") {
  const std::string text = R"({
    "seed": 7,
    "bounds": {"E": [25, 45], "k3": [6, 14]},
    "design": {"n_train": 20, "n_test": 4, "anneal": {"budget": 300}},
    "training": {"budget": 5000, "population": 20},
    "plan": {"k3_variant": "four-input", "stages": {"k1": {"hidden": 2}}},
    "protocols": {"uniaxial": {"n_steps": 200}, "triaxial": {"confinements": [50, 100]}}
  })";
  const cli::PipelineConfig c = cli::config_from_json(text);
  CHECK(c.seed == 7);
  CHECK(c.bounds[Param::E].lo == 25000.0);
  CHECK(c.bounds[Param::k3].hi == 14.0);
  CHECK(c.data.n_train == 20);
  CHECK(c.data.anneal.budget == 300);
  CHECK(c.train.budget == 5000);
  CHECK(c.train.grade.population == 20);
  CHECK(c.k3_variant == cascade::K3Variant::FourInput);
  CHECK(c.plan.stage("k1").n_hidden == 2);
  CHECK(c.plan.stage("k3").n_in() == 4);
  CHECK(c.data.protocols.uniaxial.n_steps == 200);
  CHECK(c.data.protocols.triaxial.confinements == std::vector<double>{50, 100});

  const std::string canon = cli::config_to_json(c);
  const cli::PipelineConfig back = cli::config_from_json(canon);
  CHECK(cli::config_to_json(back) == canon);
  CHECK(back.bounds == c.bounds);
  CHECK(cli::config_to_json(cli::config_from_json("{}")) == cli::config_to_json(cli::PipelineConfig{}));
}

TEST_CASE("config errors name the key") {
  auto message = [](const std::string& text) -> std::string {
    try {
      cli::config_from_json(text);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(R"({"design": {"n_trian": 5}})").find("design.n_trian") != std::string::npos);
  CHECK(message(R"({"design": {"n_train": 2}})").find("n_train") != std::string::npos);
  CHECK(message(R"({"seed": "one"})").find("seed") != std::string::npos);
  CHECK(message(R"({"bounds": {"k2": [900, 100]}})") != "");
  CHECK(message(R"({"plan": {"k3_variant": "three-input"}})") != "");
  CHECK(message("{") != "");
}

TEST_CASE("exit codes") {
  CHECK(cli::exit_code_for(ConfigError("x")) == 2);
  CHECK(cli::exit_code_for(DataError("x")) == 3);
  CHECK(cli::exit_code_for(ConvergenceError("x")) == 4);
  CHECK(cli::exit_code_for(IoError("x")) == 5);
  CHECK(cli::exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("sample writes designs and skips unchanged reruns") {
  TempDir tmp("mpcal_cli_sample");
  const fs::path cfg = tmp.path / "config.json";
  std::ofstream(cfg) << R"({"design": {"n_train": 4, "n_test": 2, "anneal": {"budget": 50}}})";
  const std::string out = (tmp.path / "run").string();
  REQUIRE(run_cli({"-c", cfg.string(), "-o", out, "sample"}) == 0);

  const fs::path train = fs::path(out) / "designs" / "uniaxial_train.csv";
  const doe::DesignSet d = doe::read_design(train);
  CHECK(d.samples() == 4);
  CHECK(d.dims() == 6);
  for (std::size_t j = 0; j < d.dims(); ++j) {
    auto col = d.column(j);
    std::sort(col.begin(), col.end());
    for (std::size_t i = 0; i < 4; ++i) CHECK(col[i] == doctest::Approx((i + 0.5) / 4.0));
  }
  CHECK(doe::read_design(fs::path(out) / "designs" / "c20_test.csv").samples() == 2);

  const std::string manifest = slurp(fs::path(out) / "manifest.json");
  REQUIRE(run_cli({"-c", cfg.string(), "-o", out, "sample"}) == 0);
  CHECK(slurp(fs::path(out) / "manifest.json") == manifest);

  SUBCASE("an edited design is stale downstream") {
    std::ofstream(train, std::ios::app) << "\n";
    CHECK(run_cli({"-c", cfg.string(), "-o", out, "simulate", "-b", "uniaxial"}) == 3);
  }
  SUBCASE("a step without its inputs fails") {
    fs::remove_all(fs::path(out) / "designs");
    CHECK(run_cli({"-c", cfg.string(), "-o", out, "train"}) == 3);
  }
}

TEST_CASE("bad invocations") {
  TempDir tmp("mpcal_cli_bad");
  const fs::path cfg = tmp.path / "config.json";
  std::ofstream(cfg) << R"({"design": {"unknown": 1}})";
  CHECK(run_cli({"-c", cfg.string(), "sample"}) == 2);
  CHECK(run_cli({"-c", (tmp.path / "missing.json").string(), "sample"}) == 5);
  CHECK(run_cli({}) == 2);
}
