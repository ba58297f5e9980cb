// pcaplm — self-supervised failure detection for packet captures.
//
// Subcommands: synth | ingest | train | detect | tag | eval
// One JSON config file drives every stage; common knobs have flag overrides.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "pcaplm/pipeline.hpp"

namespace {

using namespace pcaplm;

bool is_data_error(Errc code) {
  switch (code) {
    case Errc::bad_magic:
    case Errc::corrupt_header:
    case Errc::io_failure:
    case Errc::malformed_xml:
    case Errc::empty_document:
    case Errc::empty_corpus:
    case Errc::vocab_hash_mismatch:
    case Errc::id_mismatch:
    case Errc::insufficient_captures:
    case Errc::too_few_samples:
    case Errc::empty_set:
    case Errc::bad_config:
      return true;
    default:
      return false;
  }
}

struct CommonFlags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> repr;
  std::optional<std::string> detector;
  std::optional<int> k;
  std::optional<int> workers;

  PipelineConfig resolve() const {
    PipelineConfig config = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (seed) {
      config.seed = *seed;
      config.train.seed = *seed;
    }
    if (repr) config.repr = repr_kind_from_name(*repr);
    if (detector) config.fda.detector = detector_from_name(*detector);
    if (k) config.fda.k = *k;
    if (workers) config.workers = *workers;
    if (const char* env = std::getenv("PCAPLM_ARTIFACT_DIR")) config.paths.artifact_dir = env;
    config.validate();
    return config;
  }
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "pipeline config JSON");
  cmd->add_option("--seed", flags.seed, "override the pipeline seed");
  cmd->add_option("--repr", flags.repr, "text | dict | pct-dict");
  cmd->add_option("--detector", flags.detector, "threshold | elliptic");
  cmd->add_option("--k", flags.k, "top-k chunks per capture");
  cmd->add_option("--workers", flags.workers, "worker threads (0 = all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-language-model failure detection for packet captures"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto* synth = app.add_subcommand("synth", "generate a labeled synthetic SIP corpus");
  int n_success = 20, n_failure = 20;
  std::string synth_out;
  add_common(synth, flags);
  synth->add_option("--n-success", n_success, "successful captures to generate");
  synth->add_option("--n-failure", n_failure, "failed captures to generate");
  synth->add_option("--out", synth_out, "output corpus directory");

  auto* ingest = app.add_subcommand("ingest", "dissect, sanitize and serialize captures");
  std::string in_dir, out_dir, vocab_path;
  add_common(ingest, flags);
  ingest->add_option("--in", in_dir, "input directory (pcap/pdml) or manifest")->required();
  ingest->add_option("--out", out_dir, "output directory for serialized captures");
  ingest->add_option("--vocab", vocab_path, "existing vocabulary; enables chunk stores");

  auto* train_cmd = app.add_subcommand("train", "train the MLM and fit the detectors");
  std::string train_corpus, train_artifacts;
  add_common(train_cmd, flags);
  train_cmd->add_option("--corpus", train_corpus, "ingested corpus directory");
  train_cmd->add_option("--artifacts", train_artifacts, "artifact output directory");

  auto* detect = app.add_subcommand("detect", "classify captures with a trained bundle");
  std::string detect_in, detect_out = "verdicts.tsv", detect_artifacts;
  bool detect_tag = false;
  add_common(detect, flags);
  detect->add_option("--in", detect_in, "captures: directory, manifest, or single file")->required();
  detect->add_option("--out", detect_out, "verdict stream output path");
  detect->add_option("--artifacts", detect_artifacts, "trained bundle directory");
  detect->add_flag("--tag", detect_tag, "emit tag reports for detected failures");

  auto* tag_cmd = app.add_subcommand("tag", "detect with tag reports always on");
  std::string tag_in, tag_out = "verdicts.tsv", tag_artifacts;
  add_common(tag_cmd, flags);
  tag_cmd->add_option("--in", tag_in, "captures: directory, manifest, or single file")->required();
  tag_cmd->add_option("--out", tag_out, "verdict stream output path");
  tag_cmd->add_option("--artifacts", tag_artifacts, "trained bundle directory");

  auto* eval = app.add_subcommand("eval", "score verdicts against ground truth");
  std::vector<std::string> eval_verdicts;
  std::string eval_labels, eval_out = "eval";
  add_common(eval, flags);
  eval->add_option("--verdicts", eval_verdicts, "one or more verdict streams")->required();
  eval->add_option("--labels", eval_labels, "labels.tsv with ground truth")->required();
  eval->add_option("--out", eval_out, "output prefix for report and scatter files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    PipelineConfig config = flags.resolve();

    if (synth->parsed()) {
      std::string out = synth_out.empty() ? config.paths.corpus_dir : synth_out;
      SynthSummary s = cmd_synth(config, n_success, n_failure, config.seed, out);
      std::printf("wrote %d success + %d failure captures to %s\n", s.successes, s.failures,
                  out.c_str());
      std::printf("labels: %s\nsplit: %s\n", s.labels_path.c_str(), s.split_path.c_str());
    } else if (ingest->parsed()) {
      std::string out = out_dir.empty() ? config.paths.corpus_dir : out_dir;
      IngestSummary s = cmd_ingest(config, in_dir, out, vocab_path);
      for (const IngestEntry& e : s.entries) {
        if (s.chunked)
          std::printf("%s\t%d chunks\n", e.capture_id.c_str(), e.chunks);
        else
          std::printf("%s\t%zu lines (chunking deferred: no vocabulary yet)\n",
                      e.capture_id.c_str(), e.lines);
      }
    } else if (train_cmd->parsed()) {
      std::string corpus = train_corpus.empty() ? config.paths.corpus_dir : train_corpus;
      std::string artifacts = train_artifacts.empty() ? config.paths.artifact_dir : train_artifacts;
      TrainSummary s = cmd_train(config, corpus, artifacts);
      std::printf("trained %d epochs (best %d, val nll %.6f)\n", s.epochs, s.best_epoch,
                  s.best_val_nll);
      std::printf("bundle: %s, %s, %s, %s\n", s.vocab_path.c_str(), s.checkpoint_path.c_str(),
                  s.fda_path.c_str(), s.log_path.c_str());
    } else if (detect->parsed() || tag_cmd->parsed()) {
      bool tagging = detect->parsed() ? detect_tag : true;
      std::string in = detect->parsed() ? detect_in : tag_in;
      std::string out = detect->parsed() ? detect_out : tag_out;
      std::string arts = detect->parsed() ? detect_artifacts : tag_artifacts;
      if (arts.empty()) arts = config.paths.artifact_dir;
      std::optional<DetectorKind> override_kind;
      if (flags.detector) override_kind = detector_from_name(*flags.detector);
      DetectSummary s = cmd_detect(config, arts, in, out, tagging, override_kind);
      std::printf("classified %d captures (%d failures) -> %s\n", s.captures, s.failures,
                  s.verdicts_path.c_str());
      if (!s.tags_path.empty()) std::printf("tags: %s\n", s.tags_path.c_str());
    } else if (eval->parsed()) {
      EvalSummary s = cmd_eval(config, eval_verdicts, eval_labels, eval_out);
      for (const auto& [path, report] : s.reports) {
        std::printf("== %s\n%s", path.c_str(), render_eval_report(report).c_str());
      }
      if (s.mean_capture_ms >= 0)
        std::printf("mean inference time per capture: %.3f ms\n", s.mean_capture_ms);
      std::printf("report: %s\nscatter: %s\n", s.report_path.c_str(), s.scatter_path.c_str());
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_data_error(e.code()) ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
