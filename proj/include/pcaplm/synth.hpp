#pragma once

#include <string>
#include <vector>

#include "pcaplm/fda.hpp"
#include "pcaplm/pcap.hpp"

namespace pcaplm {

enum class FailureMode {
  error_status,     // final INVITE response is a 4xx/5xx/6xx
  timeout_gap,      // INVITE retransmission burst, response never arrives
  missing_message,  // an essential mid-flow message silently dropped
};

// SIP-over-UDP call-flow grammar. Success paths always terminate in a
// completed dialog (INVITE..200..ACK..BYE..200); every failure path deviates
// from all success paths in serialized content.
struct FlowGrammar {
  std::vector<std::string> names = {"alice", "bob", "carol", "dave", "erin", "frank"};
  std::vector<std::string> domains = {"example.net", "example.org", "ims.example.com"};
  // Final-response lines drawn by error_status failures.
  std::vector<std::string> error_statuses = {
      "500 Server Internal Error",
      "503 Service Unavailable - no media gateway available for call setup",
      "486 Busy Here",
      "480 Temporarily Unavailable - subscriber absent from registrar",
      "600 Busy Everywhere",
  };
  std::vector<FailureMode> failure_modes = {FailureMode::error_status, FailureMode::timeout_gap,
                                            FailureMode::missing_message};
  double p_register = 0.5;       // REGISTER/200 preamble
  double p_progress = 0.25;      // 183 Session Progress
  int max_ringing = 2;           // 1..max_ringing copies of 180 Ringing
  int invite_retransmissions = 3;
};

struct LabeledCapture {
  CaptureFile capture;
  Label label = Label::success;
  std::vector<uint32_t> planted_frames;  // nonempty iff label == failure
};

// Deterministic in (grammar, counts, seed). Capture paths are synthetic file
// names ("success_0001.pcap" / "failure_0001.pcap").
std::vector<LabeledCapture> generate(const FlowGrammar& grammar, int n_success, int n_failure,
                                     uint64_t seed);

struct CorpusSplit {
  std::vector<LabeledCapture> train;  // success-only
  std::vector<LabeledCapture> val;    // balanced between classes
  std::vector<LabeledCapture> test;   // balanced between classes
};

// ratios = (train, val, test) fractions summing to 1. Failures are divided
// between val and test by the val:test ratio; an equal number of successes
// joins each of those partitions, the rest of the successes train.
CorpusSplit split(const std::vector<LabeledCapture>& captures, const std::vector<double>& ratios,
                  uint64_t seed);

}  // namespace pcaplm
