#pragma once

#include <string>
#include <vector>

#include "pcaplm/fda.hpp"
#include "pcaplm/model.hpp"
#include "pcaplm/represent.hpp"
#include "pcaplm/sanitize.hpp"

namespace pcaplm {

struct FdaConfig {
  DetectorKind detector = DetectorKind::threshold;
  int k = 3;
  double multiplier = 3.0;
  double level = 0.997;
  bool top_k_aggregation = true;  // plain means when false (ablation only)
};

struct PathsConfig {
  std::string corpus_dir = "corpus";
  std::string artifact_dir = "artifacts";
};

// One config file drives every subcommand; every artifact records the hash
// of the config that produced it.
struct PipelineConfig {
  uint64_t seed = 1;
  ReprKind repr = ReprKind::PCT_DICT;
  int chunk_size = 64;
  double mask_rate = 0.20;
  int vocab_size = 4096;
  uint64_t vocab_seed = 0;
  FieldAllowlist allowlist = FieldAllowlist::defaults();
  RedactionRuleSet redaction = RedactionRuleSet::defaults();
  ModelConfig model = ModelConfig::desk_scale();
  TrainConfig train;
  FdaConfig fda;
  PathsConfig paths;
  int workers = 0;       // 0 = hardware concurrency
  int inference_repeats = 1;

  int effective_workers() const;
  void validate() const;
};

PipelineConfig load_config(const std::string& path);
PipelineConfig parse_config_json(const std::string& json_text);
std::string config_to_json(const PipelineConfig& config);

// FNV-1a over the canonical JSON rendering.
uint64_t config_hash(const PipelineConfig& config);

}  // namespace pcaplm
