#include "pcaplm/config.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

using nlohmann::json;

int PipelineConfig::effective_workers() const {
  if (workers > 0) return workers;
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  if (chunk_size < 2) fail(Errc::bad_config, "chunk_size must be >= 2");
  if (mask_rate <= 0.0 || mask_rate >= 1.0) fail(Errc::bad_config, "mask_rate must be in (0,1)");
  if (vocab_size < 16) fail(Errc::bad_config, "vocab_size must be >= 16");
  if (fda.k < 1) fail(Errc::bad_config, "fda.k must be >= 1");
  if (fda.level <= 0.0 || fda.level >= 1.0) fail(Errc::bad_config, "fda.level must be in (0,1)");
  if (inference_repeats < 1) fail(Errc::bad_config, "inference repeats must be >= 1");
}

namespace {

ModelConfig model_from_json(const json& j) {
  ModelConfig mc = ModelConfig::desk_scale();
  if (j.contains("preset")) {
    std::string preset = j.at("preset").get<std::string>();
    if (preset == "desk")
      mc = ModelConfig::desk_scale();
    else if (preset == "paper")
      mc = ModelConfig::paper_scale();
    else
      fail(Errc::bad_config, "unknown model preset '" + preset + "'");
  }
  if (j.contains("layers")) mc.layers = j.at("layers").get<int>();
  if (j.contains("heads")) mc.heads = j.at("heads").get<int>();
  if (j.contains("hidden_dim")) mc.hidden_dim = j.at("hidden_dim").get<int>();
  if (j.contains("intermediate_dim")) mc.intermediate_dim = j.at("intermediate_dim").get<int>();
  if (j.contains("dropout")) mc.dropout = j.at("dropout").get<double>();
  if (j.contains("max_positions")) mc.max_positions = j.at("max_positions").get<int>();
  return mc;
}

}  // namespace

PipelineConfig parse_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(Errc::bad_config, std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("repr")) c.repr = repr_kind_from_name(j.at("repr").get<std::string>());
  if (j.contains("chunk_size")) c.chunk_size = j.at("chunk_size").get<int>();
  if (j.contains("mask_rate")) c.mask_rate = j.at("mask_rate").get<double>();
  if (j.contains("vocab")) {
    const json& v = j.at("vocab");
    if (v.contains("size")) c.vocab_size = v.at("size").get<int>();
    if (v.contains("seed")) c.vocab_seed = v.at("seed").get<uint64_t>();
  }
  if (j.contains("allowlist")) {
    c.allowlist.entries.clear();
    for (const auto& e : j.at("allowlist")) c.allowlist.entries.push_back(e.get<std::string>());
  }
  if (j.contains("redaction")) {
    const json& r = j.at("redaction");
    // A "rules" array replaces the default list wholesale; "enable" and
    // "disable" then toggle rules by name.
    if (r.contains("rules")) {
      c.redaction.rules.clear();
      for (const auto& jr : r.at("rules")) {
        RedactionRule rule;
        rule.name = jr.at("name").get<std::string>();
        rule.pattern = jr.at("pattern").get<std::string>();
        if (jr.contains("enabled")) rule.enabled = jr.at("enabled").get<bool>();
        if (jr.contains("replacement")) rule.replacement = jr.at("replacement").get<std::string>();
        if (jr.contains("icase")) rule.icase = jr.at("icase").get<bool>();
        c.redaction.rules.push_back(std::move(rule));
      }
    }
    if (r.contains("enable"))
      for (const auto& name : r.at("enable"))
        for (auto& rule : c.redaction.rules)
          if (rule.name == name.get<std::string>()) rule.enabled = true;
    if (r.contains("disable"))
      for (const auto& name : r.at("disable"))
        for (auto& rule : c.redaction.rules)
          if (rule.name == name.get<std::string>()) rule.enabled = false;
    if (r.contains("id_fields")) {
      c.redaction.id_fields.clear();
      for (const auto& e : r.at("id_fields")) c.redaction.id_fields.push_back(e.get<std::string>());
    }
  }
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  c.model.vocab_size = c.vocab_size;
  c.model.chunk_size = c.chunk_size;
  if (c.model.max_positions < c.chunk_size) c.model.max_positions = c.chunk_size;
  if (j.contains("train")) {
    const json& t = j.at("train");
    if (t.contains("lr")) c.train.lr = t.at("lr").get<double>();
    if (t.contains("weight_decay")) c.train.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("beta1")) c.train.beta1 = t.at("beta1").get<double>();
    if (t.contains("beta2")) c.train.beta2 = t.at("beta2").get<double>();
    if (t.contains("epsilon")) c.train.epsilon = t.at("epsilon").get<double>();
    if (t.contains("batch_size")) c.train.batch_size = t.at("batch_size").get<int>();
    if (t.contains("max_epochs")) c.train.max_epochs = t.at("max_epochs").get<int>();
    if (t.contains("patience")) c.train.patience = t.at("patience").get<int>();
    if (t.contains("seed")) c.train.seed = t.at("seed").get<uint64_t>();
  }
  if (j.contains("fda")) {
    const json& f = j.at("fda");
    if (f.contains("detector")) c.fda.detector = detector_from_name(f.at("detector").get<std::string>());
    if (f.contains("k")) c.fda.k = f.at("k").get<int>();
    if (f.contains("multiplier")) c.fda.multiplier = f.at("multiplier").get<double>();
    if (f.contains("level")) c.fda.level = f.at("level").get<double>();
    if (f.contains("top_k_aggregation")) c.fda.top_k_aggregation = f.at("top_k_aggregation").get<bool>();
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    if (p.contains("corpus_dir")) c.paths.corpus_dir = p.at("corpus_dir").get<std::string>();
    if (p.contains("artifact_dir")) c.paths.artifact_dir = p.at("artifact_dir").get<std::string>();
  }
  if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  if (j.contains("inference") && j.at("inference").contains("repeats"))
    c.inference_repeats = j.at("inference").at("repeats").get<int>();

  // Training masks follow the pipeline knobs unless the file pins them.
  c.train.mask_rate = c.mask_rate;
  if (!j.contains("train") || !j.at("train").contains("seed")) c.train.seed = c.seed;
  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_json(ss.str());
}

std::string config_to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["repr"] = repr_kind_name(c.repr);
  j["chunk_size"] = c.chunk_size;
  j["mask_rate"] = c.mask_rate;
  j["vocab"] = {{"size", c.vocab_size}, {"seed", c.vocab_seed}};
  j["allowlist"] = c.allowlist.entries;
  json rules = json::array();
  for (const RedactionRule& r : c.redaction.rules)
    rules.push_back({{"name", r.name},
                     {"pattern", r.pattern},
                     {"enabled", r.enabled},
                     {"replacement", r.replacement},
                     {"icase", r.icase}});
  j["redaction"] = {{"rules", rules}, {"id_fields", c.redaction.id_fields}};
  j["model"] = {{"layers", c.model.layers},
                {"heads", c.model.heads},
                {"hidden_dim", c.model.hidden_dim},
                {"intermediate_dim", c.model.intermediate_dim},
                {"dropout", c.model.dropout},
                {"max_positions", c.model.max_positions},
                {"vocab_size", c.model.vocab_size},
                {"chunk_size", c.model.chunk_size}};
  j["train"] = {{"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"epsilon", c.train.epsilon},
                {"batch_size", c.train.batch_size},
                {"max_epochs", c.train.max_epochs},
                {"patience", c.train.patience},
                {"seed", c.train.seed},
                {"mask_rate", c.train.mask_rate}};
  j["fda"] = {{"detector", detector_name(c.fda.detector)},
              {"k", c.fda.k},
              {"multiplier", c.fda.multiplier},
              {"level", c.fda.level},
              {"top_k_aggregation", c.fda.top_k_aggregation}};
  j["paths"] = {{"corpus_dir", c.paths.corpus_dir}, {"artifact_dir", c.paths.artifact_dir}};
  j["workers"] = c.workers;
  j["inference"] = {{"repeats", c.inference_repeats}};
  return j.dump(2);
}

uint64_t config_hash(const PipelineConfig& config) { return fnv1a64(config_to_json(config)); }

}  // namespace pcaplm
