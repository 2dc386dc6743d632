#pragma once

// Experiment configuration.
//
// The file format is a small TOML subset:
//
//   # comment
//   [section]
//   key = 1.5
//   key = "text"
//   key = true
//   key = [1, 2, 3]
//   key = ["a", "b"]
//
// Every key is optional; unknown sections or keys are rejected so typos do
// not silently fall back to defaults.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gflow/adapt.hpp"
#include "gflow/drift_net.hpp"
#include "gflow/episodes.hpp"
#include "gflow/target_model.hpp"
#include "gflow/trajectories.hpp"

namespace gflow::harness {

/// Raw key/value document; values keep their source text.
class ConfigDoc {
 public:
  struct Entry {
    std::string raw;
    int line = 0;
  };

  static ConfigDoc parse(const std::string& text);
  static ConfigDoc load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  const std::map<std::string, std::map<std::string, Entry>>& sections() const { return sections_; }

  double number(const std::string& section, const std::string& key) const;
  std::int64_t integer(const std::string& section, const std::string& key) const;
  bool boolean(const std::string& section, const std::string& key) const;
  std::string string(const std::string& section, const std::string& key) const;
  std::vector<double> numbers(const std::string& section, const std::string& key) const;
  std::vector<std::string> strings(const std::string& section, const std::string& key) const;

 private:
  const Entry& entry(const std::string& section, const std::string& key) const;
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

/// "various" or "<way>w<shot>s"; query size comes from the caller.
Protocol protocol_from_string(const std::string& s, int query);
std::string protocol_name(const Protocol& p);

struct PipelineConfig {
  /// Desk-scale defaults; see README for the values that differ from the
  /// per-module defaults.
  PipelineConfig();

  // [domains]
  std::uint64_t domain_seed = 7;
  int n_base = 8;
  int n_ood = 2;
  int dim = 16;
  DomainParams domain;

  // [backbone]
  MetaTrainConfig meta;
  std::vector<int> bias_layers{0, 1};

  // [trajectories]
  CollectConfig collect;

  // [drift]
  DriftArch arch;
  DriftTrainConfig drift;

  // [solver]
  int solver_steps = 10;
  std::vector<double> eta_multipliers = default_eta_multipliers();

  // [finetune]
  int finetune_steps = 50;
  std::vector<double> lr_grid{1e-2, 3e-2, 1e-1, 3e-1};

  // [eval]
  std::uint64_t eval_seed = 13;
  std::uint64_t val_seed = 11;
  int test_per_domain = 200;
  int val_per_domain = 10;
  int query = 10;
  std::vector<std::string> protocols{"various", "5w5s", "5w20s"};
  int threads = 0;  // 0: hardware concurrency

  // [profile]
  int profile_repeats = 5;
  int profile_steps = 50;
  int profile_episodes = 10;

  // [ablation]
  bool ablation = true;
  std::vector<int> ablation_domains{1, 4, 8};
  std::vector<int> ablation_inits{1, 10};
  int ablation_test_per_domain = 100;

  // [frontier]
  bool frontier = true;
  std::vector<int> frontier_steps{1, 20, 50};
  int frontier_test_per_domain = 50;

  // [pipeline]
  std::string out_dir = "gflow_out";
  std::string cache_dir = "gflow_cache";

  void validate() const;
};

PipelineConfig pipeline_config(const ConfigDoc& doc);
PipelineConfig load_pipeline_config(const std::string& path);

/// Canonical text of one section (or of all sections for ""), with every
/// field spelled out at full precision. Re-parsing yields the same config.
std::string canonical_text(const PipelineConfig& cfg, const std::string& section = "");

/// Canonical text of every section except [pipeline] (paths and threads do
/// not affect results).
std::string experiment_text(const PipelineConfig& cfg);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t x);
/// Hash of experiment_text, as 16 hex digits.
std::string fingerprint(const PipelineConfig& cfg);

std::vector<DomainSpec> make_domains(const PipelineConfig& cfg);

}  // namespace gflow::harness
