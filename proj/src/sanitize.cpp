#include "pcaplm/sanitize.hpp"

#include <mutex>
#include <unordered_map>

#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

// Compiled patterns are cached per pattern text; std::regex construction is
// far more expensive than matching.
const std::regex& compiled(const RedactionRule& rule) {
  static std::mutex mu;
  static std::unordered_map<std::string, std::regex> cache;
  std::lock_guard<std::mutex> lock(mu);
  std::string key = (rule.icase ? "i:" : "s:") + rule.pattern;
  auto it = cache.find(key);
  if (it == cache.end()) {
    auto flags = std::regex::ECMAScript | std::regex::optimize;
    if (rule.icase) flags |= std::regex::icase;
    it = cache.emplace(key, std::regex(rule.pattern, flags)).first;
  }
  return it->second;
}

const char* kIpv4Pattern =
    R"(\b(?:(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)\.){3}(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)\b)";

// Full form, leading/trailing/inner compression, v4-mapped tails, zone ids.
const char* kIpv6Pattern =
    R"((?:[0-9a-fA-F]{1,4}:){7}[0-9a-fA-F]{1,4}(?:%[0-9a-zA-Z]+)?)"
    R"(|(?:[0-9a-fA-F]{1,4}:){1,7}:(?:[0-9a-fA-F]{1,4}(?::[0-9a-fA-F]{1,4}){0,6})?(?:%[0-9a-zA-Z]+)?)"
    R"(|::(?:[fF]{4}:)?(?:\d{1,3}\.){3}\d{1,3})"
    R"(|::[0-9a-fA-F]{1,4}(?::[0-9a-fA-F]{1,4}){0,6}(?:%[0-9a-zA-Z]+)?)";

const char* kMacPattern = R"(\b(?:[0-9a-fA-F]{2}:){5}[0-9a-fA-F]{2}\b|\b(?:[0-9a-fA-F]{2}-){5}[0-9a-fA-F]{2}\b)";

// "some-id: 12345" rendered as text; keeps the label, redacts the number.
const char* kIdFieldPattern = R"(([\w.\-]*(?:-id|imsi|msisdn|imei)[\w.\-]*\s*:\s*)\+?\d+)";

const char* kImsiPattern = R"(\b\d{14,16}\b)";
const char* kMsisdnPattern = R"((?:\+|\b)\d{10,15}\b)";

const char* kDigitRunPattern = R"(\+?\d+)";

bool value_is_identifier(const std::string& field_name, const RedactionRuleSet& rules) {
  for (const std::string& pat : rules.id_fields)
    if (glob_match(pat, field_name)) return true;
  return false;
}

}  // namespace

RedactionRuleSet RedactionRuleSet::defaults() {
  RedactionRuleSet rs;
  rs.rules = {
      {"ipv4", kIpv4Pattern, true, kRedactedToken, false},
      {"ipv6", kIpv6Pattern, true, kRedactedToken, false},
      {"mac", kMacPattern, true, kRedactedToken, false},
      {"id_field", kIdFieldPattern, true, std::string("$1") + kRedactedToken, true},
      {"imsi_like", kImsiPattern, false, kRedactedToken, false},
      {"msisdn_like", kMsisdnPattern, false, kRedactedToken, false},
  };
  return rs;
}

std::string redact(const std::string& text, const RedactionRuleSet& rules) {
  // Iterate to a fixpoint: a substitution can expose a word boundary that
  // lets an adjacent address match on the next pass. Replacements never
  // reintroduce digits, so this terminates.
  std::string out = text;
  for (int round = 0; round < 100; ++round) {
    std::string next = out;
    for (const RedactionRule& rule : rules.rules) {
      if (!rule.enabled) continue;
      next = std::regex_replace(next, compiled(rule), rule.replacement);
    }
    if (next == out) break;
    out = std::move(next);
  }
  return out;
}

bool has_redactable_content(const std::string& text, const RedactionRuleSet& rules) {
  for (const RedactionRule& rule : rules.rules) {
    if (!rule.enabled) continue;
    if (std::regex_search(text, compiled(rule))) return true;
  }
  return false;
}

CaptureFile redact_capture(const CaptureFile& capture, const RedactionRuleSet& rules) {
  static const RedactionRule digit_run{"digit_run", kDigitRunPattern, true, kRedactedToken, false};
  CaptureFile out = capture;
  for (PacketRecord& rec : out.packets) {
    for (FieldEntry& field : rec.fields) {
      field.value = redact(field.value, rules);
      if (value_is_identifier(field.name, rules))
        field.value = std::regex_replace(field.value, compiled(digit_run), digit_run.replacement);
    }
  }
  return out;
}

}  // namespace pcaplm
