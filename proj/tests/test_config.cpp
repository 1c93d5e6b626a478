#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "esdd/config.hpp"
#include "esdd/errors.hpp"

using namespace esdd;
namespace fs = std::filesystem;

namespace {

struct EnvGuard {
  explicit EnvGuard(const char* name) : name_(name) {
    if (const char* v = std::getenv(name)) saved_ = v;
  }
  ~EnvGuard() {
    if (saved_.empty()) unsetenv(name_);
    else
      setenv(name_, saved_.c_str(), 1);
  }
  const char* name_;
  std::string saved_;
};

}  // namespace

TEST_CASE("parse handles sections, comments and whitespace") {
  const RunConfig cfg = RunConfig::parse(
      "# experiment setup\n"
      "\n"
      "[frontend]\n"
      "kind = gam\n"
      "  n_bands =  48  \n"
      "[train]\n"
      "batch_size = 8\n"
      "stage1_lr = 5e-4\n"
      "head_warm_start = false\n");
  CHECK(cfg.has("frontend.kind"));
  CHECK(cfg.get_string("frontend.kind", "") == "gam");
  CHECK(cfg.get_int("frontend.n_bands", 0) == 48);
  CHECK(cfg.get_int("train.batch_size", 0) == 8);
  CHECK(cfg.get_double("train.stage1_lr", 0.0) == doctest::Approx(5e-4));
  CHECK_FALSE(cfg.get_bool("train.head_warm_start", true));
  CHECK_FALSE(cfg.has("train.seed"));
}

TEST_CASE("fallbacks apply only for absent keys") {
  const RunConfig cfg = RunConfig::parse("[mixup]\nalpha = 0.5\n");
  CHECK(cfg.get_double("mixup.alpha", 9.0) == doctest::Approx(0.5));
  CHECK(cfg.get_double("mixup.apply_probability", 0.8) == doctest::Approx(0.8));
  CHECK(cfg.get_string("frontend.kind", "mel") == "mel");
  CHECK(cfg.get_bool("mixup.enabled", true));
}

TEST_CASE("unknown keys and malformed lines are rejected") {
  CHECK_THROWS_AS(RunConfig::parse("[frontend]\nwindows = 3\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[made_up]\nkind = mel\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("kind = mel\n"), ConfigError);  // no section
  CHECK_THROWS_AS(RunConfig::parse("[frontend\nkind = mel\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[]\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[frontend]\nkind mel\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[frontend]\n= mel\n"), ConfigError);

  RunConfig cfg;
  CHECK_THROWS_AS(cfg.set("frontend.bogus", "1"), ConfigError);
  CHECK_NOTHROW(cfg.set("frontend.n_bands", "32"));
  CHECK(cfg.get_int("frontend.n_bands", 0) == 32);
}

TEST_CASE("typed getters validate their values strictly") {
  const RunConfig cfg = RunConfig::parse(
      "[train]\n"
      "batch_size = 16x\n"
      "stage1_lr = fast\n"
      "head_warm_start = maybe\n");
  CHECK_THROWS_AS(cfg.get_int("train.batch_size", 0), ConfigError);
  CHECK_THROWS_AS(cfg.get_double("train.stage1_lr", 0.0), ConfigError);
  CHECK_THROWS_AS(cfg.get_bool("train.head_warm_start", false), ConfigError);

  const RunConfig ok = RunConfig::parse(
      "[train]\n"
      "batch_size = -3\n"
      "head_warm_start = on\n");
  CHECK(ok.get_int("train.batch_size", 0) == -3);
  CHECK(ok.get_bool("train.head_warm_start", false));
}

TEST_CASE("load reads a file and reports missing paths") {
  const fs::path p = fs::temp_directory_path() / "esdd_config_test.cfg";
  {
    std::ofstream f(p);
    f << "[data]\nseed = 77\nsources = srcA,srcB\n";
  }
  const RunConfig cfg = RunConfig::load(p);
  CHECK(cfg.get_int("data.seed", 0) == 77);
  CHECK(cfg.get_string("data.sources", "") == "srcA,srcB");
  fs::remove(p);
  CHECK_THROWS_AS(RunConfig::load(p), IoError);
}

TEST_CASE("seed resolution prefers ESDD_SEED over config over fallback") {
  EnvGuard guard("ESDD_SEED");
  unsetenv("ESDD_SEED");

  const RunConfig empty;
  CHECK(empty.get_seed(9) == 9);

  const RunConfig cfg = RunConfig::parse("[train]\nseed = 123\n");
  CHECK(cfg.get_seed(9) == 123);

  setenv("ESDD_SEED", "456", 1);
  CHECK(cfg.get_seed(9) == 456);
  CHECK(empty.get_seed(9) == 456);

  setenv("ESDD_SEED", "many", 1);
  CHECK_THROWS_AS(cfg.get_seed(9), ConfigError);
}
