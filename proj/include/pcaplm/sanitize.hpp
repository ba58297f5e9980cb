#pragma once

#include <regex>
#include <string>
#include <vector>

#include "pcaplm/pcap.hpp"

namespace pcaplm {

inline constexpr const char* kRedactedToken = "[REDACTED]";

struct RedactionRule {
  std::string name;
  std::string pattern;  // ECMAScript regex text
  bool enabled = true;
  // Replacement for each match; may reference capture groups ($1 ...).
  std::string replacement = kRedactedToken;
  bool icase = false;
};

struct RedactionRuleSet {
  // Applied in order; the output of one rule feeds the next.
  std::vector<RedactionRule> rules;
  // Field-name globs whose numeric values are redacted wholesale by
  // redact_capture (the text rules cannot see field names).
  std::vector<std::string> id_fields = {"*-id", "*imsi*", "*msisdn*", "*imei*"};

  static RedactionRuleSet defaults();
};

std::string redact(const std::string& text, const RedactionRuleSet& rules);
CaptureFile redact_capture(const CaptureFile& capture, const RedactionRuleSet& rules);

// True if any enabled pattern still matches; used by leakage checks.
bool has_redactable_content(const std::string& text, const RedactionRuleSet& rules);

}  // namespace pcaplm
