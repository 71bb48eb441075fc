#pragma once

// Run configuration files.
//
// Grammar, one item per line:
//   # comment            (also after a value, when preceded by whitespace)
//   [section]
//   key = value
// Keys are unique across the whole file; the section only groups them. A
// key may appear at most once. Values are trimmed; lists are comma
// separated. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nrnm/model.hpp"
#include "nrnm/tasks.hpp"
#include "nrnm/training.hpp"

namespace nrnm {

struct KeyInfo {
  const char* key;
  const char* section;
  const char* help;
};

// Every recognised key, in manifest order.
const std::vector<KeyInfo>& config_keys();
const KeyInfo* find_key(const std::string& key);

class Config {
 public:
  static Config parse(std::istream& in, const std::string& source = "<config>");
  static Config load(const std::filesystem::path& path);

  // Later values replace earlier ones. Dashes in key are read as underscores.
  void set(std::string key, std::string value);
  std::optional<std::string> get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  // Canonical text: sections in key-table order, unset keys omitted.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

struct RunConfig {
  TaskSpec task;
  ModelConfig model;  // input_dim and classes are filled from the dataset
  TrainConfig train;
  bool memory_size_given = false;
  std::filesystem::path out = "runs/latest";
  std::string version;
};

// Applies defaults and checks every field. Throws ConfigError naming the key.
RunConfig resolve(const Config& cfg);

// Model configuration for a concrete dataset (input width and classes).
ModelConfig model_for(const RunConfig& run, const Dataset& data);

// Resolved values written back as a complete config.
Config snapshot(const RunConfig& run);

}  // namespace nrnm
