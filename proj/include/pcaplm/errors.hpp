#pragma once

#include <stdexcept>
#include <string>

namespace pcaplm {

enum class Errc {
  bad_magic,
  corrupt_header,
  io_failure,
  malformed_xml,
  empty_document,
  empty_corpus,
  all_pad,
  id_out_of_range,
  shape_mismatch,
  empty_mask,
  missing_trace,
  non_finite_gradient,
  empty_set,
  diverged_loss,
  empty_metrics,
  too_few_samples,
  degenerate_covariance,
  unfitted_model,
  verdict_is_success,
  id_mismatch,
  insufficient_captures,
  empty_grammar,
  vocab_hash_mismatch,
  degenerate_logits,
  bad_config,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::bad_magic: return "BadMagic";
    case Errc::corrupt_header: return "CorruptHeader";
    case Errc::io_failure: return "IoFailure";
    case Errc::malformed_xml: return "MalformedXml";
    case Errc::empty_document: return "EmptyDocument";
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::all_pad: return "AllPad";
    case Errc::id_out_of_range: return "IdOutOfRange";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::empty_mask: return "EmptyMask";
    case Errc::missing_trace: return "MissingTrace";
    case Errc::non_finite_gradient: return "NonFiniteGradient";
    case Errc::empty_set: return "EmptySet";
    case Errc::diverged_loss: return "DivergedLoss";
    case Errc::empty_metrics: return "EmptyMetrics";
    case Errc::too_few_samples: return "TooFewSamples";
    case Errc::degenerate_covariance: return "DegenerateCovariance";
    case Errc::unfitted_model: return "UnfittedModel";
    case Errc::verdict_is_success: return "VerdictIsSuccess";
    case Errc::id_mismatch: return "IdMismatch";
    case Errc::insufficient_captures: return "InsufficientCaptures";
    case Errc::empty_grammar: return "EmptyGrammar";
    case Errc::vocab_hash_mismatch: return "VocabHashMismatch";
    case Errc::degenerate_logits: return "DegenerateLogits";
    case Errc::bad_config: return "BadConfig";
  }
  return "Unknown";
}

// Every recoverable failure in the library throws Error; the CLI maps
// data-shaped codes to exit 2 and everything else to exit 3.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace pcaplm
