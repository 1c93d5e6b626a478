#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace esdd {

// Flat `key = value` run configuration with [section] headers; keys are
// addressed as "section.key". Unknown keys are rejected at parse time so a
// typo'd experiment config fails loudly.
class RunConfig {
 public:
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig parse(const std::string& text);
  RunConfig() = default;

  // CLI overrides go through set(); it enforces the same key registry.
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::uint64_t get_seed(std::uint64_t fallback) const;  // honors ESDD_SEED

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace esdd
