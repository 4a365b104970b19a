#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "stp/data.hpp"
#include "stp/downstream.hpp"
#include "stp/model.hpp"
#include "stp/training.hpp"

namespace stp {

struct ConfigKey {
  const char* key;
  const char* def;
  const char* help;
};

// Flat key=value run configuration: schema-checked (unknown keys rejected),
// loadable from a file, overridable by CLI flags / STP_* environment
// variables. The digest of the resolved model.* keys is stamped into every
// checkpoint.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<ConfigKey>& schema();

  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);  // rejects unknown keys
  bool was_set(const std::string& key) const { return set_keys_.count(key) > 0; }

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  int64_t get_i64(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Resolved sorted key=value text (what config.echo contains).
  std::string echo() const;
  // FNV-1a64 over the sorted resolved "model.*" lines.
  uint64_t model_digest() const;
  // model.* lookup with preset fallback (explicit keys win over the preset).
  std::string resolved_model_value(const std::string& key) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  SynthManifest synth_manifest() const;
  DataPipelineConfig pipeline_config() const;
  ToyEnvConfig env_config() const;
  PolicyConfig policy_config() const;
  ProbeConfig probe_config() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> set_keys_;
};

}  // namespace stp
