#include "pcaplm/report.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

using namespace pcaplm;

namespace {

std::vector<std::pair<std::string, Label>> truth_of(
    const std::vector<std::pair<std::string, bool>>& entries) {
  std::vector<std::pair<std::string, Label>> out;
  for (const auto& [id, failed] : entries)
    out.emplace_back(id, failed ? Label::failure : Label::success);
  return out;
}

Verdict verdict_of(const std::string& id, bool failed, double nom_k = 0, double mnll_k = 0) {
  Verdict v;
  v.capture_id = id;
  v.label = failed ? Label::failure : Label::success;
  v.score.capture_id = id;
  v.score.nom_k = nom_k;
  v.score.mnll_k = mnll_k;
  return v;
}

}  // namespace

TEST_CASE("published precision/recall pairs reproduce published F1/F2") {
  // (precision, recall, f1, f2) rows; tolerance 1e-3 against 3-decimal values.
  const double rows[][4] = {
      // representation/detector comparison, success class
      {0.688, 0.950, 0.798, 0.882},
      {0.719, 0.820, 0.766, 0.797},
      {0.808, 0.760, 0.783, 0.769},
      {0.857, 0.840, 0.848, 0.843},
      {0.850, 0.570, 0.682, 0.610},
      // failure class
      {0.919, 0.570, 0.703, 0.616},
      {0.790, 0.680, 0.731, 0.699},
      {0.773, 0.820, 0.796, 0.810},
      {0.843, 0.860, 0.851, 0.857},
      {0.676, 0.900, 0.772, 0.844},
      // cross-service rows
      {0.774, 0.982, 0.866, 0.932},
      {0.980, 0.753, 0.852, 0.790},
      {0.747, 0.441, 0.554, 0.480},
      {0.177, 0.447, 0.254, 0.342},
  };
  for (const auto& row : rows) {
    ClassMetrics m = metrics_from_pr(row[0], row[1]);
    CHECK(std::abs(m.f1 - row[2]) <= 0.001);
    CHECK(std::abs(m.f2 - row[3]) <= 0.001);
  }
}

TEST_CASE("f-score identities and edges") {
  ClassMetrics perfect = metrics_from_pr(1.0, 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.f2 == 1.0);

  DetRng rng(80);
  for (int i = 0; i < 200; ++i) {
    double p = rng.next_double(), r = rng.next_double();
    ClassMetrics m = metrics_from_pr(p, r);
    if (p + r > 0) {
      CHECK(std::abs(m.f1 - 2 * p * r / (p + r)) < 1e-9);
      CHECK(std::abs(m.f2 - 5 * p * r / (4 * p + r)) < 1e-9);
    }
  }

  ClassMetrics zero = metrics_from_pr(0.0, 0.0);
  CHECK(zero.f1 == 0.0);
  CHECK(zero.f2 == 0.0);
  CHECK(zero.degenerate);
}

TEST_CASE("evaluate counts a confusion matrix with failure as positive") {
  std::vector<Verdict> verdicts = {verdict_of("a", true), verdict_of("b", false),
                                   verdict_of("c", true), verdict_of("d", false),
                                   verdict_of("e", false)};
  auto truth = truth_of({{"a", true}, {"b", true}, {"c", false}, {"d", false}, {"e", false}});
  EvalReport report = evaluate(verdicts, truth);
  CHECK(report.counts.tp == 1);
  CHECK(report.counts.fn == 1);
  CHECK(report.counts.fp == 1);
  CHECK(report.counts.tn == 2);
  CHECK(report.counts.total() == 5);
  CHECK(report.failure.precision == doctest::Approx(0.5));
  CHECK(report.failure.recall == doctest::Approx(0.5));
  CHECK(report.success.precision == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(report.success.recall == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("all-correct verdicts give unit metrics for both classes") {
  std::vector<Verdict> verdicts = {verdict_of("a", true), verdict_of("b", false)};
  auto truth = truth_of({{"a", true}, {"b", false}});
  EvalReport report = evaluate(verdicts, truth);
  CHECK(report.failure.precision == 1.0);
  CHECK(report.failure.recall == 1.0);
  CHECK(report.failure.f1 == 1.0);
  CHECK(report.failure.f2 == 1.0);
  CHECK(report.success.f2 == 1.0);
}

TEST_CASE("swapping class labels swaps the per-class reports") {
  DetRng rng(81);
  std::vector<Verdict> verdicts;
  std::vector<std::pair<std::string, Label>> truth, flipped_truth;
  std::vector<Verdict> flipped_verdicts;
  for (int i = 0; i < 60; ++i) {
    std::string id = "c" + std::to_string(i);
    bool pred = rng.next_below(2) == 0;
    bool actual = rng.next_below(2) == 0;
    verdicts.push_back(verdict_of(id, pred));
    flipped_verdicts.push_back(verdict_of(id, !pred));
    truth.emplace_back(id, actual ? Label::failure : Label::success);
    flipped_truth.emplace_back(id, actual ? Label::success : Label::failure);
  }
  EvalReport a = evaluate(verdicts, truth);
  EvalReport b = evaluate(flipped_verdicts, flipped_truth);
  CHECK(a.failure.precision == b.success.precision);
  CHECK(a.failure.recall == b.success.recall);
  CHECK(a.failure.f1 == b.success.f1);
  CHECK(a.failure.f2 == b.success.f2);
  CHECK(a.success.precision == b.failure.precision);
}

TEST_CASE("missing ground truth is IdMismatch") {
  std::vector<Verdict> verdicts = {verdict_of("nope", true)};
  try {
    evaluate(verdicts, truth_of({{"other", true}}));
    FAIL("expected IdMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::id_mismatch);
  }
}

TEST_CASE("zero denominators flag the report as degenerate") {
  // No predicted failures at all: failure precision denominator is zero.
  std::vector<Verdict> verdicts = {verdict_of("a", false), verdict_of("b", false)};
  auto truth = truth_of({{"a", true}, {"b", false}});
  EvalReport report = evaluate(verdicts, truth);
  CHECK(report.failure.precision == 0.0);
  CHECK(report.failure.degenerate);
}

TEST_CASE("scatter rows reproduce aggregate outputs exactly") {
  std::vector<Verdict> verdicts = {verdict_of("a", true, 4.5, 1.25),
                                   verdict_of("b", false, 0.5, 0.125)};
  auto truth = truth_of({{"a", true}, {"b", false}});
  auto rows = scatter_data(verdicts, truth);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].nom_k == 4.5);
  CHECK(rows[0].mnll_k == 1.25);
  CHECK(rows[0].true_label == "failure");
  CHECK(rows[0].predicted_label == "failure");
  CHECK(rows[1].true_label == "success");

  CHECK(scatter_data({}, truth).empty());
  std::string tsv = render_scatter(rows);
  CHECK(tsv.find("capture_id\tnom_k\tmnll_k\ttrue_label\tpredicted_label\n") == 0);
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 3);  // header + 2 rows
}

TEST_CASE("tagging renders top-NOM chunks with highlighted mispredictions") {
  // Tiny vocabulary over a micro-corpus, then one planted misprediction.
  SerializedCapture sc;
  sc.capture_id = "cap";
  sc.kind = ReprKind::PCT_DICT;
  sc.lines = {{223, "## frame 223"}, {223, "status: error"}, {224, "## frame 224"},
              {224, "status: ok"}};
  Vocabulary vocab = train_vocab({sc}, 64, 0);
  auto chunks = chunk_capture(sc, vocab, 16);
  REQUIRE(!chunks.empty());

  MaskedChunk mc = mask(chunks[0], 0.2, 9);
  ChunkPrediction pred;
  pred.capture_id = "cap";
  pred.chunk_index = 0;
  pred.masked_positions = mc.masked_positions;
  pred.true_ids = mc.original_ids;
  // First masked token mispredicted, the rest correct.
  pred.predicted_ids = mc.original_ids;
  pred.predicted_ids[0] = pred.predicted_ids[0] == 4 ? 5 : 4;
  for (size_t i = 0; i < pred.masked_positions.size(); ++i)
    pred.probabilities.push_back(Eigen::VectorXd::Constant(vocab.size(), 1.0 / vocab.size()));

  ChunkMetrics metrics = score_chunk(pred);
  metrics.first_frame = chunks[0].first_frame;
  metrics.last_frame = chunks[0].last_frame;
  CHECK(metrics.nom == 1);

  Verdict v;
  v.capture_id = "cap";
  v.label = Label::failure;
  TagReport report = tag(v, {metrics}, {mc}, {pred}, vocab, 3);
  REQUIRE(report.entries.size() == 1);  // one chunk, one entry
  const TagEntry& entry = report.entries[0];
  CHECK(entry.frame_no == 223);
  CHECK(entry.nom == 1);
  REQUIRE(entry.highlighted_spans.size() == 1);
  auto [from, to] = entry.highlighted_spans[0];
  // The span covers exactly the mispredicted token's original text.
  std::string inside = entry.rendered_chunk_text.substr(static_cast<size_t>(from),
                                                        static_cast<size_t>(to - from));
  std::string expected = detokenize({pred.true_ids[0]}, vocab);
  CHECK(inside == expected);

  std::string rendered = render_tag_report(report);
  CHECK(rendered.find("in frame: 223") != std::string::npos);
  CHECK(rendered.find("number of misclassifications in chunk: 1") != std::string::npos);
  CHECK(rendered.find("chunk content:") != std::string::npos);
}

TEST_CASE("tagging a success verdict is an error") {
  Verdict v;
  v.capture_id = "ok";
  v.label = Label::success;
  Vocabulary vocab;
  try {
    tag(v, {}, {}, {}, vocab, 3);
    FAIL("expected VerdictIsSuccess");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::verdict_is_success);
  }
}

TEST_CASE("tag fidelity: every highlight is a mispredicted masked token") {
  SerializedCapture sc;
  sc.capture_id = "fid";
  sc.kind = ReprKind::PCT_DICT;
  for (uint32_t f = 1; f <= 6; ++f) {
    sc.lines.push_back({f, "## frame " + std::to_string(f)});
    sc.lines.push_back({f, "word" + std::to_string(f % 3) + " tail"});
  }
  Vocabulary vocab = train_vocab({sc}, 96, 0);
  auto chunks = chunk_capture(sc, vocab, 12);
  DetRng rng(5);
  std::vector<ChunkMetrics> metrics;
  std::vector<MaskedChunk> masked;
  std::vector<ChunkPrediction> preds;
  for (const Chunk& c : chunks) {
    MaskedChunk mc = mask(c, 0.25, 3);
    ChunkPrediction p;
    p.capture_id = mc.chunk.capture_id;
    p.chunk_index = mc.chunk.chunk_index;
    p.masked_positions = mc.masked_positions;
    p.true_ids = mc.original_ids;
    for (size_t i = 0; i < mc.masked_positions.size(); ++i) {
      bool wrong = rng.next_below(2) == 0;
      p.predicted_ids.push_back(wrong ? (mc.original_ids[i] + 1) % vocab.size()
                                      : mc.original_ids[i]);
      p.probabilities.push_back(Eigen::VectorXd::Constant(vocab.size(), 1.0 / vocab.size()));
    }
    ChunkMetrics m = score_chunk(p);
    m.first_frame = c.first_frame;
    m.last_frame = c.last_frame;
    metrics.push_back(m);
    masked.push_back(mc);
    preds.push_back(p);
  }
  Verdict v;
  v.capture_id = "fid";
  v.label = Label::failure;
  TagReport report = tag(v, metrics, masked, preds, vocab, 3);
  CHECK(report.entries.size() == std::min<size_t>(3, chunks.size()));
  // Entries run by nom descending.
  for (size_t i = 1; i < report.entries.size(); ++i)
    CHECK(report.entries[i - 1].nom >= report.entries[i].nom);
  for (const TagEntry& entry : report.entries) {
    const ChunkPrediction& p = preds[static_cast<size_t>(entry.chunk_index)];
    size_t expected_highlights = 0;
    for (size_t i = 0; i < p.masked_positions.size(); ++i)
      if (p.predicted_ids[i] != p.true_ids[i]) ++expected_highlights;
    CHECK(entry.highlighted_spans.size() == expected_highlights);
  }
}
