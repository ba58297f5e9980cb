#include "pcaplm/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

// Render the chunk's original tokens, bolding the mispredicted masked ones
// with ** markers, and collect the byte spans of the bolded tokens.
void render_chunk_with_highlights(const MaskedChunk& mc, const ChunkPrediction& pred,
                                  const Vocabulary& vocab, TagEntry& entry) {
  std::vector<int> original = mc.chunk.token_ids;
  for (size_t i = 0; i < mc.masked_positions.size(); ++i)
    original[static_cast<size_t>(mc.masked_positions[i])] = mc.original_ids[i];

  std::vector<bool> highlight(original.size(), false);
  for (size_t i = 0; i < pred.masked_positions.size(); ++i)
    if (pred.predicted_ids[i] != pred.true_ids[i])
      highlight[static_cast<size_t>(pred.masked_positions[i])] = true;

  std::string out;
  const std::string marker = Vocabulary::kWordStart;
  for (size_t pos = 0; pos < original.size(); ++pos) {
    int id = original[pos];
    if (id == Vocabulary::pad_id) continue;
    std::string piece = detokenize({id}, vocab);
    bool word_start = id < 4 || vocab.token(id).rfind(marker, 0) == 0;
    if (word_start && !out.empty()) out += ' ';
    if (highlight[pos]) {
      entry.highlighted_spans.emplace_back(static_cast<int>(out.size() + 2),
                                           static_cast<int>(out.size() + 2 + piece.size()));
      out += "**" + piece + "**";
    } else {
      out += piece;
    }
  }
  entry.rendered_chunk_text = out;
}

ClassMetrics metrics_from_counts(int64_t tp, int64_t fp, int64_t fn) {
  ClassMetrics m;
  if (tp + fp == 0 || tp + fn == 0) m.degenerate = true;
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  ClassMetrics f = metrics_from_pr(m.precision, m.recall);
  m.f1 = f.f1;
  m.f2 = f.f2;
  m.degenerate = m.degenerate || f.degenerate;
  return m;
}

}  // namespace

double f_beta(double precision, double recall, double beta) {
  double b2 = beta * beta;
  double denom = b2 * precision + recall;
  if (denom <= 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / denom;
}

ClassMetrics metrics_from_pr(double precision, double recall) {
  ClassMetrics m;
  m.precision = precision;
  m.recall = recall;
  if (precision + recall <= 0.0) m.degenerate = true;
  m.f1 = f_beta(precision, recall, 1.0);
  m.f2 = f_beta(precision, recall, 2.0);
  return m;
}

TagReport tag(const Verdict& verdict, const std::vector<ChunkMetrics>& metrics,
              const std::vector<MaskedChunk>& chunks, const std::vector<ChunkPrediction>& preds,
              const Vocabulary& vocab, int k) {
  if (verdict.label != Label::failure)
    fail(Errc::verdict_is_success, "tagging is only defined for failure verdicts");
  if (metrics.size() != chunks.size() || metrics.size() != preds.size())
    fail(Errc::id_mismatch, "metrics, chunks and predictions must align");

  TagReport report;
  report.capture_id = verdict.capture_id;
  report.verdict = verdict;

  std::vector<size_t> order(metrics.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (metrics[a].nom != metrics[b].nom) return metrics[a].nom > metrics[b].nom;
    return metrics[a].chunk_index < metrics[b].chunk_index;
  });
  size_t take = std::min(order.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < take; ++i) {
    size_t idx = order[i];
    TagEntry entry;
    entry.frame_no = chunks[idx].chunk.first_frame;
    entry.chunk_index = metrics[idx].chunk_index;
    entry.nom = metrics[idx].nom;
    render_chunk_with_highlights(chunks[idx], preds[idx], vocab, entry);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

std::string render_tag_report(const TagReport& report) {
  std::ostringstream out;
  out << "found failure for pcap:\n";
  for (const TagEntry& entry : report.entries) {
    out << "pcap filename: " << report.capture_id << ", in frame: " << entry.frame_no << ".\n";
    out << "number of misclassifications in chunk: " << entry.nom << ".\n";
    out << "chunk content:\n";
    out << entry.rendered_chunk_text << "\n";
    out << "\n";
  }
  return out.str();
}

EvalReport evaluate(const std::vector<Verdict>& verdicts,
                    const std::vector<std::pair<std::string, Label>>& truth) {
  std::map<std::string, Label> truth_by_id(truth.begin(), truth.end());
  EvalReport report;
  for (const Verdict& v : verdicts) {
    auto it = truth_by_id.find(v.capture_id);
    if (it == truth_by_id.end())
      fail(Errc::id_mismatch, "no ground-truth label for capture '" + v.capture_id + "'");
    bool actual_failure = it->second == Label::failure;
    bool predicted_failure = v.label == Label::failure;
    if (predicted_failure && actual_failure) ++report.counts.tp;
    else if (predicted_failure && !actual_failure) ++report.counts.fp;
    else if (!predicted_failure && actual_failure) ++report.counts.fn;
    else ++report.counts.tn;
  }
  const ConfusionMatrix& c = report.counts;
  report.failure = metrics_from_counts(c.tp, c.fp, c.fn);
  // Swapping the positive class swaps tp<->tn and fp<->fn.
  report.success = metrics_from_counts(c.tn, c.fn, c.fp);
  return report;
}

std::string render_eval_report(const EvalReport& report) {
  char line[256];
  std::string out;
  out += "class      precision  recall     f1         f2\n";
  std::snprintf(line, sizeof line, "success    %-10.3f %-10.3f %-10.3f %-10.3f%s\n",
                report.success.precision, report.success.recall, report.success.f1,
                report.success.f2, report.success.degenerate ? "  (degenerate)" : "");
  out += line;
  std::snprintf(line, sizeof line, "failure    %-10.3f %-10.3f %-10.3f %-10.3f%s\n",
                report.failure.precision, report.failure.recall, report.failure.f1,
                report.failure.f2, report.failure.degenerate ? "  (degenerate)" : "");
  out += line;
  std::snprintf(line, sizeof line, "counts     tp=%lld fp=%lld tn=%lld fn=%lld\n",
                static_cast<long long>(report.counts.tp), static_cast<long long>(report.counts.fp),
                static_cast<long long>(report.counts.tn), static_cast<long long>(report.counts.fn));
  out += line;
  return out;
}

std::vector<ScatterRow> scatter_data(const std::vector<Verdict>& verdicts,
                                     const std::vector<std::pair<std::string, Label>>& truth) {
  std::map<std::string, Label> truth_by_id(truth.begin(), truth.end());
  std::vector<ScatterRow> rows;
  rows.reserve(verdicts.size());
  for (const Verdict& v : verdicts) {
    ScatterRow row;
    row.capture_id = v.capture_id;
    row.nom_k = v.score.nom_k;
    row.mnll_k = v.score.mnll_k;
    auto it = truth_by_id.find(v.capture_id);
    row.true_label = it == truth_by_id.end() ? "unknown" : label_name(it->second);
    row.predicted_label = label_name(v.label);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_scatter(const std::vector<ScatterRow>& rows) {
  std::string out = "capture_id\tnom_k\tmnll_k\ttrue_label\tpredicted_label\n";
  char buf[64];
  for (const ScatterRow& row : rows) {
    out += row.capture_id;
    std::snprintf(buf, sizeof buf, "\t%.9g\t%.9g\t", row.nom_k, row.mnll_k);
    out += buf;
    out += row.true_label;
    out += '\t';
    out += row.predicted_label;
    out += '\n';
  }
  return out;
}

}  // namespace pcaplm
