#include "esdd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "esdd/errors.hpp"

namespace esdd {
namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "frontend.kind",
      "frontend.window_len",
      "frontend.hop",
      "frontend.n_bands",
      "frontend.f_min",
      "frontend.f_max",
      "frontend.bins_per_octave",
      "frontend.log_floor",
      "model.blocks",
      "model.kernel",
      "model.embedding_dim",
      "loss.w_asoftmax",
      "loss.w_contrastive",
      "loss.w_center",
      "loss.asoftmax_margin",
      "loss.contrastive_margin",
      "loss.center_update_rate",
      "mixup.alpha",
      "mixup.apply_probability",
      "mixup.enabled",
      "train.batch_size",
      "train.seed",
      "train.head_warm_start",
      "train.stage1_epochs",
      "train.stage1_lr",
      "train.stage2_epochs",
      "train.stage2_lr",
      "train.stage3_epochs",
      "train.stage3_lr",
      "train.epochs",
      "train.lr",
      "data.seed",
      "data.phase_iterations",
      "data.train_bonafide_per_kind",
      "data.train_fake_per_generator_per_kind",
      "data.test_bonafide_per_kind",
      "data.test_fake_per_generator_per_kind",
      "data.test_fake_per_heldout_generator_per_kind",
      "data.generators",
      "data.heldout_generators",
      "data.sources",
      "data.heldout_sources",
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  return parse(buf.str());
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg.set(section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw ConfigError("unknown config key: " + key);
  values_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string RunConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long long RunConfig::get_int(const std::string& key, long long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an integer: " + it->second);
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: " + it->second);
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + v);
}

std::uint64_t RunConfig::get_seed(std::uint64_t fallback) const {
  std::uint64_t seed = fallback;
  if (has("train.seed")) seed = static_cast<std::uint64_t>(get_int("train.seed", 0));
  if (const char* env = std::getenv("ESDD_SEED")) {
    try {
      seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("ESDD_SEED is not an integer: " + std::string(env));
    }
  }
  return seed;
}

}  // namespace esdd
