#include "pcaplm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pcaplm/pdml.hpp"

namespace pcaplm {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kInferTag = 0x696e666572ull;  // inference masking stream

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  out << content;
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Capture inputs accepted everywhere: raw pcap, PDML, or an already
// serialized representation.
bool is_capture_file(const std::string& name) {
  return has_suffix(name, ".pcap") || has_suffix(name, ".pdml") || has_suffix(name, ".xml") ||
         has_suffix(name, ".repr.tsv");
}

std::vector<std::string> collect_inputs(const std::string& input) {
  std::vector<std::string> paths;
  if (fs::is_directory(input)) {
    for (const auto& entry : fs::directory_iterator(input))
      if (entry.is_regular_file() && is_capture_file(entry.path().filename().string()))
        paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
  } else if (fs::is_regular_file(input) && has_suffix(input, ".tsv") &&
             !has_suffix(input, ".repr.tsv")) {
    // Manifest: first column is a path, relative to the manifest directory.
    fs::path base = fs::path(input).parent_path();
    for (const std::string& line : split_char(read_text_file(input), '\n')) {
      if (line.empty() || line[0] == '#') continue;
      std::string first = split_char(line, '\t')[0];
      if (first.empty()) continue;
      fs::path p(first);
      paths.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
  } else if (fs::is_regular_file(input)) {
    paths.push_back(input);
  } else {
    fail(Errc::io_failure, "input " + input + " does not exist");
  }
  return paths;
}

SerializedCapture load_capture_serialized(const std::string& path, const PipelineConfig& config,
                                          ReprKind kind) {
  if (has_suffix(path, ".repr.tsv")) return load_serialized(path);
  CaptureFile capture = has_suffix(path, ".pcap") ? read_pcap(path) : ingest_pdml(path);
  CaptureFile clean = redact_capture(capture, config.redaction);
  return build_repr(clean, kind, config.allowlist);
}

struct CaptureScore {
  PcapScore score;
  std::vector<ChunkMetrics> metrics;       // first repeat
  std::vector<MaskedChunk> masked;         // first repeat
  std::vector<ChunkPrediction> preds;      // first repeat
  bool empty = false;                      // capture produced no chunks
};

// Shared by training-set scoring and detection; single-shot by default with
// a fixed per-capture masking stream, optionally averaged over repeats.
CaptureScore score_capture(const Params<float>& params, const std::vector<Chunk>& chunks,
                           const PipelineConfig& config, double mask_rate, bool keep_details) {
  CaptureScore out;
  if (chunks.empty()) {
    out.empty = true;
    out.score.k = config.fda.k;
    return out;
  }
  const int repeats = config.inference_repeats;
  const uint64_t base = mix64(config.seed, kInferTag);

  std::vector<double> nom_sums(chunks.size(), 0.0), mnll_sums(chunks.size(), 0.0);
  for (int r = 0; r < repeats; ++r) {
    std::vector<MaskedChunk> masked;
    masked.reserve(chunks.size());
    for (const Chunk& c : chunks) masked.push_back(mask(c, mask_rate, mix64(base, static_cast<uint64_t>(r))));
    std::vector<ChunkPrediction> preds = predict(params, masked);
    std::vector<ChunkMetrics> metrics;
    metrics.reserve(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
      ChunkMetrics m = score_chunk(preds[i]);
      m.first_frame = chunks[i].first_frame;
      m.last_frame = chunks[i].last_frame;
      metrics.push_back(m);
      nom_sums[i] += static_cast<double>(m.nom);
      mnll_sums[i] += m.mnll;
    }
    if (r == 0) {
      out.metrics = metrics;
      if (keep_details) {
        out.masked = std::move(masked);
        out.preds = std::move(preds);
      }
    }
  }

  if (repeats == 1) {
    out.score = config.fda.top_k_aggregation ? aggregate(out.metrics, config.fda.k)
                                             : aggregate_mean(out.metrics);
    return out;
  }

  // Averaged metrics across maskings, then the usual top-k means.
  std::vector<std::pair<double, double>> mean(chunks.size());
  for (size_t i = 0; i < chunks.size(); ++i)
    mean[i] = {nom_sums[i] / repeats, mnll_sums[i] / repeats};
  std::vector<size_t> by_nom(chunks.size());
  for (size_t i = 0; i < by_nom.size(); ++i) by_nom[i] = i;
  std::sort(by_nom.begin(), by_nom.end(), [&](size_t a, size_t b) {
    if (mean[a].first != mean[b].first) return mean[a].first > mean[b].first;
    return chunks[a].chunk_index < chunks[b].chunk_index;
  });
  const size_t k = config.fda.top_k_aggregation ? static_cast<size_t>(config.fda.k) : chunks.size();
  const size_t take = std::min(k, chunks.size());
  std::vector<double> noms, mnlls;
  for (const auto& [nom, mnll] : mean) {
    noms.push_back(nom);
    mnlls.push_back(mnll);
  }
  std::sort(noms.rbegin(), noms.rend());
  std::sort(mnlls.rbegin(), mnlls.rend());
  out.score.capture_id = chunks.front().capture_id;
  out.score.k = static_cast<int>(k);
  out.score.nom_k = 0;
  out.score.mnll_k = 0;
  for (size_t i = 0; i < take; ++i) {
    out.score.nom_k += noms[i];
    out.score.mnll_k += mnlls[i];
  }
  out.score.nom_k /= static_cast<double>(take);
  out.score.mnll_k /= static_cast<double>(take);
  for (size_t i = 0; i < take; ++i) out.score.top_chunks.push_back(chunks[by_nom[i]].chunk_index);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// labels / verdict streams
// ---------------------------------------------------------------------------

void save_labels(const std::vector<LabeledCapture>& captures, const std::string& path) {
  std::string out = "# pcaplm-labels v1\n";
  for (const LabeledCapture& lc : captures) {
    out += lc.capture.path;
    out += '\t';
    out += label_name(lc.label);
    out += '\t';
    for (size_t i = 0; i < lc.planted_frames.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(lc.planted_frames[i]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

std::vector<LabelEntry> load_labels(const std::string& path) {
  std::vector<LabelEntry> entries;
  for (const std::string& line : split_char(read_text_file(path), '\n')) {
    if (line.empty() || line[0] == '#') continue;
    auto parts = split_char(line, '\t');
    if (parts.size() < 2) fail(Errc::io_failure, path + ": malformed label line '" + line + "'");
    LabelEntry e;
    e.capture_id = capture_id_of(parts[0]);
    e.label = parts[1] == "failure" ? Label::failure : Label::success;
    if (parts.size() >= 3 && !parts[2].empty())
      for (const std::string& f : split_char(parts[2], ','))
        e.planted_frames.push_back(static_cast<uint32_t>(std::stoul(f)));
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_verdicts(const std::vector<Verdict>& verdicts, const std::string& path) {
  std::string out = "# pcaplm-verdicts v1: capture_id label detector nom_k mnll_k k evidence\n";
  for (const Verdict& v : verdicts) {
    out += v.capture_id;
    out += '\t';
    out += label_name(v.label);
    out += '\t';
    out += detector_name(v.detector);
    out += '\t';
    out += g17(v.score.nom_k);
    out += '\t';
    out += g17(v.score.mnll_k);
    out += '\t';
    out += std::to_string(v.score.k);
    out += '\t';
    for (size_t i = 0; i < v.evidence.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(v.evidence[i]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

std::vector<Verdict> load_verdicts(const std::string& path) {
  std::vector<Verdict> verdicts;
  for (const std::string& line : split_char(read_text_file(path), '\n')) {
    if (line.empty() || line[0] == '#') continue;
    auto parts = split_char(line, '\t');
    if (parts.size() < 6) fail(Errc::io_failure, path + ": malformed verdict line");
    Verdict v;
    v.capture_id = parts[0];
    v.label = parts[1] == "failure" ? Label::failure : Label::success;
    v.detector = detector_from_name(parts[2]);
    v.score.capture_id = parts[0];
    v.score.nom_k = std::stod(parts[3]);
    v.score.mnll_k = std::stod(parts[4]);
    v.score.k = std::stoi(parts[5]);
    if (parts.size() >= 7 && !parts[6].empty())
      for (const std::string& c : split_char(parts[6], ','))
        v.evidence.push_back(std::stoi(c));
    v.score.top_chunks = v.evidence;
    verdicts.push_back(std::move(v));
  }
  return verdicts;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

SynthSummary cmd_synth(const PipelineConfig& config, int n_success, int n_failure, uint64_t seed,
                       const std::string& out_dir) {
  fs::create_directories(out_dir);
  FlowGrammar grammar;
  std::vector<LabeledCapture> captures = generate(grammar, n_success, n_failure, seed);
  for (const LabeledCapture& lc : captures)
    write_pcap(lc.capture, (fs::path(out_dir) / lc.capture.path).string());

  SynthSummary summary;
  summary.successes = n_success;
  summary.failures = n_failure;
  summary.labels_path = (fs::path(out_dir) / "labels.tsv").string();
  save_labels(captures, summary.labels_path);

  CorpusSplit parts = split(captures, {0.8, 0.1, 0.1}, seed);
  summary.split_path = (fs::path(out_dir) / "split.tsv").string();
  std::string split_text = "# pcaplm-split v1\n";
  auto manifest = [&](const std::vector<LabeledCapture>& list, const char* name) {
    std::string text = "# pcaplm-manifest v1\n";
    for (const LabeledCapture& lc : list) {
      text += lc.capture.path;
      text += '\n';
      split_text += capture_id_of(lc.capture.path);
      split_text += '\t';
      split_text += name;
      split_text += '\n';
    }
    write_text_file((fs::path(out_dir) / (std::string(name) + ".tsv")).string(), text);
  };
  manifest(parts.train, "train");
  manifest(parts.val, "val");
  manifest(parts.test, "test");
  write_text_file(summary.split_path, split_text);
  (void)config;
  return summary;
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

IngestSummary cmd_ingest(const PipelineConfig& config, const std::string& in_dir,
                         const std::string& out_dir, const std::string& vocab_path) {
  fs::create_directories(out_dir);
  std::vector<std::string> inputs = collect_inputs(in_dir);
  std::optional<Vocabulary> vocab;
  if (!vocab_path.empty()) vocab = load_vocab(vocab_path);

  IngestSummary summary;
  summary.chunked = vocab.has_value();
  summary.entries.resize(inputs.size());
  detail::parallel_for(static_cast<int>(inputs.size()), config.effective_workers(), [&](int i) {
    const std::string& path = inputs[static_cast<size_t>(i)];
    SerializedCapture sc = load_capture_serialized(path, config, config.repr);
    save_serialized(sc, (fs::path(out_dir) / (sc.capture_id + ".repr.tsv")).string());
    IngestEntry entry;
    entry.capture_id = sc.capture_id;
    entry.lines = sc.lines.size();
    if (vocab) {
      std::vector<Chunk> chunks = chunk_capture(sc, *vocab, config.chunk_size);
      save_chunks(chunks, (fs::path(out_dir) / (sc.capture_id + ".chunks.tsv")).string());
      entry.chunks = static_cast<int>(chunks.size());
    }
    summary.entries[static_cast<size_t>(i)] = std::move(entry);
  });

  // Side files travel with the corpus.
  for (const char* name : {"labels.tsv", "split.tsv", "train.tsv", "val.tsv", "test.tsv"}) {
    fs::path src = fs::path(in_dir) / name;
    if (fs::is_regular_file(src)) fs::copy_file(src, fs::path(out_dir) / name, fs::copy_options::overwrite_existing);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, std::string> load_split_map(const std::string& path) {
  std::map<std::string, std::string> out;
  for (const std::string& line : split_char(read_text_file(path), '\n')) {
    if (line.empty() || line[0] == '#') continue;
    auto parts = split_char(line, '\t');
    if (parts.size() != 2) fail(Errc::io_failure, path + ": malformed split line");
    out[parts[0]] = parts[1];
  }
  return out;
}

}  // namespace

TrainSummary cmd_train(const PipelineConfig& config, const std::string& corpus_dir,
                       const std::string& artifact_dir) {
  fs::create_directories(artifact_dir);
  const std::string split_path = (fs::path(corpus_dir) / "split.tsv").string();
  if (!fs::is_regular_file(split_path))
    fail(Errc::io_failure, corpus_dir + " lacks split.tsv; run synth/ingest first");
  std::map<std::string, std::string> split_map = load_split_map(split_path);

  std::map<std::string, Label> label_map;
  const std::string labels_path = (fs::path(corpus_dir) / "labels.tsv").string();
  if (fs::is_regular_file(labels_path))
    for (const LabelEntry& e : load_labels(labels_path)) label_map[e.capture_id] = e.label;

  std::vector<SerializedCapture> train_caps, val_caps;
  for (const auto& entry : fs::directory_iterator(corpus_dir)) {
    std::string name = entry.path().filename().string();
    if (!has_suffix(name, ".repr.tsv")) continue;
    SerializedCapture sc = load_serialized(entry.path().string());
    if (sc.kind != config.repr)
      fail(Errc::bad_config, sc.capture_id + " was serialized as " + repr_kind_name(sc.kind) +
                                 " but the config wants " + repr_kind_name(config.repr));
    auto it = split_map.find(sc.capture_id);
    if (it == split_map.end()) continue;
    auto lit = label_map.find(sc.capture_id);
    Label label = lit == label_map.end() ? Label::success : lit->second;
    if (it->second == "train") {
      if (label == Label::failure)
        fail(Errc::bad_config, "training partition must contain only successful captures");
      train_caps.push_back(std::move(sc));
    } else if (it->second == "val" && label == Label::success) {
      // MLM early stopping watches reconstruction of known-good captures;
      // the failure half of the validation split is for the detector.
      val_caps.push_back(std::move(sc));
    }
  }
  if (train_caps.empty()) fail(Errc::empty_corpus, "no training captures found in " + corpus_dir);
  if (val_caps.empty()) fail(Errc::empty_corpus, "no successful validation captures found");
  std::sort(train_caps.begin(), train_caps.end(),
            [](const SerializedCapture& a, const SerializedCapture& b) { return a.capture_id < b.capture_id; });
  std::sort(val_caps.begin(), val_caps.end(),
            [](const SerializedCapture& a, const SerializedCapture& b) { return a.capture_id < b.capture_id; });

  Vocabulary vocab = train_vocab(train_caps, config.vocab_size, config.vocab_seed);

  std::vector<Chunk> train_chunks, val_chunks;
  std::vector<std::pair<std::string, std::vector<Chunk>>> train_by_capture;
  for (const SerializedCapture& sc : train_caps) {
    std::vector<Chunk> cs = chunk_capture(sc, vocab, config.chunk_size);
    train_chunks.insert(train_chunks.end(), cs.begin(), cs.end());
    train_by_capture.emplace_back(sc.capture_id, std::move(cs));
  }
  for (const SerializedCapture& sc : val_caps) {
    std::vector<Chunk> cs = chunk_capture(sc, vocab, config.chunk_size);
    val_chunks.insert(val_chunks.end(), cs.begin(), cs.end());
  }

  TrainConfig tc = config.train;
  tc.threads = config.effective_workers();
  TrainResult<float> result = train<float>(train_chunks, val_chunks, config.model, tc);

  // Detector statistics come from the training captures, scored through the
  // same masking path inference uses.
  std::vector<PcapScore> train_scores;
  train_scores.reserve(train_by_capture.size());
  for (const auto& [id, chunks] : train_by_capture) {
    CaptureScore cs = score_capture(result.params, chunks, config, tc.mask_rate, false);
    if (!cs.empty) train_scores.push_back(cs.score);
  }
  FdaModel fda;
  fda.active = config.fda.detector;
  fda.k = config.fda.k;
  fda.config_hash = config_hash(config);
  fda.vocab_hash = vocab.hash();
  fda.threshold = fit_threshold(train_scores, config.fda.multiplier);
  if (train_scores.size() >= 3) fda.elliptic = fit_elliptic(train_scores, config.fda.level);

  TrainSummary summary;
  summary.vocab_path = (fs::path(artifact_dir) / "vocab.txt").string();
  summary.checkpoint_path = (fs::path(artifact_dir) / "model.ckpt").string();
  summary.fda_path = (fs::path(artifact_dir) / "fda.txt").string();
  summary.log_path = (fs::path(artifact_dir) / "train_log.tsv").string();
  save_vocab(vocab, summary.vocab_path);

  CheckpointMeta meta;
  meta.train = tc;
  meta.vocab_hash = vocab.hash();
  meta.repr = repr_kind_name(config.repr);
  meta.config_hash = config_hash(config);
  save_checkpoint(result.params, meta, summary.checkpoint_path);
  save_fda(fda, summary.fda_path);

  std::string log_text = "# pcaplm-train-log v1: epoch train_nll val_nll\n";
  for (const EpochLog& e : result.log)
    log_text += std::to_string(e.epoch) + "\t" + g17(e.train_nll) + "\t" + g17(e.val_nll) + "\n";
  write_text_file(summary.log_path, log_text);
  write_text_file((fs::path(artifact_dir) / "config.json").string(), config_to_json(config));

  summary.epochs = static_cast<int>(result.log.size());
  summary.best_epoch = result.best_epoch;
  summary.best_val_nll = result.best_val_nll;
  return summary;
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

DetectSummary cmd_detect(const PipelineConfig& config, const std::string& artifact_dir,
                         const std::string& input, const std::string& out_path, bool emit_tags,
                         std::optional<DetectorKind> detector_override) {
  Vocabulary vocab = load_vocab((fs::path(artifact_dir) / "vocab.txt").string());
  CheckpointMeta meta;
  Params<float> params =
      load_checkpoint<float>((fs::path(artifact_dir) / "model.ckpt").string(), meta);
  if (meta.vocab_hash != vocab.hash())
    fail(Errc::vocab_hash_mismatch, "checkpoint was trained against a different vocabulary");
  FdaModel fda = load_fda((fs::path(artifact_dir) / "fda.txt").string());
  if (fda.vocab_hash != vocab.hash())
    fail(Errc::vocab_hash_mismatch, "detector statistics reference a different vocabulary");
  if (detector_override) fda.active = *detector_override;
  const ReprKind repr = repr_kind_from_name(meta.repr);

  std::vector<std::string> inputs = collect_inputs(input);
  std::vector<Verdict> verdicts(inputs.size());
  std::vector<std::string> tags(inputs.size());
  std::vector<double> millis(inputs.size(), 0.0);

  detail::parallel_for(static_cast<int>(inputs.size()), config.effective_workers(), [&](int i) {
    auto t0 = std::chrono::steady_clock::now();
    const std::string& path = inputs[static_cast<size_t>(i)];
    SerializedCapture sc = load_capture_serialized(path, config, repr);
    std::vector<Chunk> chunks = chunk_capture(sc, vocab, meta.model.chunk_size);
    CaptureScore cs = score_capture(params, chunks, config, meta.train.mask_rate, emit_tags);
    Verdict v;
    if (cs.empty) {
      // Nothing to score: an empty capture cannot witness a failure.
      v.capture_id = sc.capture_id;
      v.detector = fda.active;
      v.score.capture_id = sc.capture_id;
      v.score.k = fda.k;
    } else {
      v = classify(cs.score, fda);
    }
    if (emit_tags && v.label == Label::failure)
      tags[static_cast<size_t>(i)] =
          render_tag_report(tag(v, cs.metrics, cs.masked, cs.preds, vocab, fda.k));
    verdicts[static_cast<size_t>(i)] = std::move(v);
    millis[static_cast<size_t>(i)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  });

  DetectSummary summary;
  summary.captures = static_cast<int>(verdicts.size());
  for (const Verdict& v : verdicts)
    if (v.label == Label::failure) ++summary.failures;
  summary.verdicts_path = out_path;
  save_verdicts(verdicts, out_path);

  // Wall-clock sidecar; kept out of the verdict stream so verdicts stay
  // byte-reproducible.
  std::string timing_text = "# pcaplm-timings v1: capture_id millis\n";
  for (size_t i = 0; i < inputs.size(); ++i)
    timing_text += verdicts[i].capture_id + "\t" + g17(millis[i]) + "\n";
  write_text_file(out_path + ".timings.tsv", timing_text);

  if (emit_tags) {
    summary.tags_path = out_path + ".tags.txt";
    std::string all;
    for (const std::string& t : tags) all += t;
    write_text_file(summary.tags_path, all);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

EvalSummary cmd_eval(const PipelineConfig& config, const std::vector<std::string>& verdict_paths,
                     const std::string& labels_path, const std::string& out_prefix) {
  (void)config;
  std::vector<std::pair<std::string, Label>> truth;
  for (const LabelEntry& e : load_labels(labels_path)) truth.emplace_back(e.capture_id, e.label);

  EvalSummary summary;
  std::string report_text;
  std::string scatter_text;
  for (const std::string& path : verdict_paths) {
    std::vector<Verdict> verdicts = load_verdicts(path);
    EvalReport report = evaluate(verdicts, truth);
    report_text += "== " + path + "\n" + render_eval_report(report);
    scatter_text += render_scatter(scatter_data(verdicts, truth));
    summary.reports.emplace_back(path, report);

    const std::string timing_path = path + ".timings.tsv";
    if (fs::is_regular_file(timing_path)) {
      double total = 0;
      int n = 0;
      for (const std::string& line : split_char(read_text_file(timing_path), '\n')) {
        if (line.empty() || line[0] == '#') continue;
        auto parts = split_char(line, '\t');
        if (parts.size() == 2) {
          total += std::stod(parts[1]);
          ++n;
        }
      }
      if (n > 0) {
        summary.mean_capture_ms = total / n;
        char buf[128];
        std::snprintf(buf, sizeof buf, "mean inference time per capture: %.3f ms (n=%d)\n",
                      summary.mean_capture_ms, n);
        report_text += buf;
      }
    }
  }
  summary.report_path = out_prefix + ".report.txt";
  summary.scatter_path = out_prefix + ".scatter.tsv";
  write_text_file(summary.report_path, report_text);
  write_text_file(summary.scatter_path, scatter_text);
  return summary;
}

}  // namespace pcaplm
