#pragma once

#include <string>
#include <vector>

#include "pcaplm/fda.hpp"
#include "pcaplm/tokenizer.hpp"

namespace pcaplm {

struct TagEntry {
  uint32_t frame_no = 0;  // first frame of the chunk's span
  int chunk_index = 0;
  int nom = 0;
  std::string rendered_chunk_text;                  // original tokens, highlighted
  std::vector<std::pair<int, int>> highlighted_spans;  // byte ranges into the text
};

struct TagReport {
  std::string capture_id;
  Verdict verdict;
  std::vector<TagEntry> entries;  // by nom descending, at most k
};

// Only defined for failure verdicts: render the top-NOM chunks with the
// mispredicted masked tokens marked.
TagReport tag(const Verdict& verdict, const std::vector<ChunkMetrics>& metrics,
              const std::vector<MaskedChunk>& chunks, const std::vector<ChunkPrediction>& preds,
              const Vocabulary& vocab, int k);

std::string render_tag_report(const TagReport& report);

struct ConfusionMatrix {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double f2 = 0;
  bool degenerate = false;  // some denominator was zero
};

struct EvalReport {
  ClassMetrics success;
  ClassMetrics failure;
  ConfusionMatrix counts;  // failure = positive class
};

// F1 and F2 from a precision/recall pair (beta-weighted harmonic means).
ClassMetrics metrics_from_pr(double precision, double recall);
double f_beta(double precision, double recall, double beta);

EvalReport evaluate(const std::vector<Verdict>& verdicts, const std::vector<std::pair<std::string, Label>>& truth);

std::string render_eval_report(const EvalReport& report);

struct ScatterRow {
  std::string capture_id;
  double nom_k = 0;
  double mnll_k = 0;
  std::string true_label;
  std::string predicted_label;
};

std::vector<ScatterRow> scatter_data(const std::vector<Verdict>& verdicts,
                                     const std::vector<std::pair<std::string, Label>>& truth);

// Tab-separated with a header row.
std::string render_scatter(const std::vector<ScatterRow>& rows);

}  // namespace pcaplm
