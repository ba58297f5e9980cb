#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcaplm/config.hpp"
#include "pcaplm/report.hpp"
#include "pcaplm/synth.hpp"

namespace pcaplm {

struct LabelEntry {
  std::string capture_id;
  Label label = Label::success;
  std::vector<uint32_t> planted_frames;
};

void save_labels(const std::vector<LabeledCapture>& captures, const std::string& path);
std::vector<LabelEntry> load_labels(const std::string& path);

void save_verdicts(const std::vector<Verdict>& verdicts, const std::string& path);
std::vector<Verdict> load_verdicts(const std::string& path);

// ---- synth ----------------------------------------------------------------

struct SynthSummary {
  int successes = 0;
  int failures = 0;
  std::string labels_path;
  std::string split_path;
};

// Writes pcaps, labels.tsv, split.tsv and per-partition manifests
// (train.tsv / val.tsv / test.tsv) into out_dir.
SynthSummary cmd_synth(const PipelineConfig& config, int n_success, int n_failure, uint64_t seed,
                       const std::string& out_dir);

// ---- ingest ---------------------------------------------------------------

struct IngestEntry {
  std::string capture_id;
  size_t lines = 0;
  int chunks = -1;  // -1 when no vocabulary was available for chunking
};

struct IngestSummary {
  std::vector<IngestEntry> entries;
  bool chunked = false;
};

// pcap/PDML inputs -> sanitized serialized captures in out_dir (plus a chunk
// store per capture when a vocabulary is supplied).
IngestSummary cmd_ingest(const PipelineConfig& config, const std::string& in_dir,
                         const std::string& out_dir, const std::string& vocab_path = "");

// ---- train ----------------------------------------------------------------

struct TrainSummary {
  std::string vocab_path;
  std::string checkpoint_path;
  std::string fda_path;
  std::string log_path;
  int epochs = 0;
  int best_epoch = 0;
  double best_val_nll = 0;
};

// corpus_dir: ingested serialized captures plus split.tsv and labels.tsv.
TrainSummary cmd_train(const PipelineConfig& config, const std::string& corpus_dir,
                       const std::string& artifact_dir);

// ---- detect ---------------------------------------------------------------

struct DetectSummary {
  std::string verdicts_path;
  std::string tags_path;  // empty when tagging was off
  int captures = 0;
  int failures = 0;
};

// `input` is a directory of captures (.pcap / .pdml / .xml / .repr.tsv) or a
// manifest .tsv listing capture paths. Verdict order follows input order.
DetectSummary cmd_detect(const PipelineConfig& config, const std::string& artifact_dir,
                         const std::string& input, const std::string& out_path, bool emit_tags,
                         std::optional<DetectorKind> detector_override = std::nullopt);

// ---- eval -----------------------------------------------------------------

struct EvalSummary {
  std::vector<std::pair<std::string, EvalReport>> reports;  // one per verdict file
  std::string report_path;
  std::string scatter_path;
  double mean_capture_ms = -1;  // -1 when no timing sidecar was found
};

EvalSummary cmd_eval(const PipelineConfig& config, const std::vector<std::string>& verdict_paths,
                     const std::string& labels_path, const std::string& out_prefix);

}  // namespace pcaplm
