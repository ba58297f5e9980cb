#include "pcaplm/synth.hpp"

#include <set>

#include "doctest.h"
#include "pcaplm/errors.hpp"
#include "pcaplm/represent.hpp"
#include "pcaplm/sanitize.hpp"
#include "pcaplm/util.hpp"

using namespace pcaplm;

namespace {

std::set<std::string> serialized_words(const LabeledCapture& lc) {
  CaptureFile clean = redact_capture(lc.capture, RedactionRuleSet::defaults());
  SerializedCapture sc = build_pct_dict(clean, FieldAllowlist::defaults());
  std::set<std::string> words;
  for (const ReprLine& line : sc.lines)
    for (const std::string& w : split_ws(line.text)) words.insert(w);
  return words;
}

}  // namespace

TEST_CASE("zero counts give an empty corpus") {
  CHECK(generate(FlowGrammar{}, 0, 0, 1).empty());
}

TEST_CASE("empty grammar is rejected") {
  FlowGrammar g;
  g.failure_modes.clear();
  try {
    generate(g, 1, 1, 1);
    FAIL("expected EmptyGrammar");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_grammar);
  }
}

TEST_CASE("error_status failures carry exactly one 4xx/5xx/6xx at a recorded frame") {
  FlowGrammar g;
  g.failure_modes = {FailureMode::error_status};
  auto captures = generate(g, 0, 10, 42);
  REQUIRE(captures.size() == 10);
  for (const LabeledCapture& lc : captures) {
    CHECK(lc.label == Label::failure);
    REQUIRE(lc.planted_frames.size() == 1);
    int error_lines = 0;
    uint32_t error_frame = 0;
    for (const PacketRecord& rec : lc.capture.packets) {
      for (const FieldEntry& f : rec.fields) {
        if (f.name != "sip.status-code") continue;
        int code = std::stoi(f.value);
        if (code >= 400) {
          ++error_lines;
          error_frame = rec.frame_no;
        }
      }
    }
    CHECK(error_lines == 1);
    CHECK(error_frame == lc.planted_frames[0]);
  }
}

TEST_CASE("success captures complete the dialog, failures deviate") {
  auto captures = generate(FlowGrammar{}, 30, 30, 7);
  for (const LabeledCapture& lc : captures) {
    if (lc.label == Label::failure) continue;
    CHECK(lc.planted_frames.empty());
    // Every success flow terminates with the BYE transaction's 200 OK.
    const PacketRecord& last = lc.capture.packets.back();
    bool has_ok = false, has_bye_cseq = false;
    for (const FieldEntry& f : last.fields) {
      if (f.name == "sip.status-code" && f.value == "200") has_ok = true;
      if (f.name == "sip.cseq" && f.value == "2 BYE") has_bye_cseq = true;
    }
    CHECK(has_ok);
    CHECK(has_bye_cseq);
  }
  // Label soundness: no failure serialization collides with a success one.
  std::set<std::string> success_keys;
  for (const LabeledCapture& lc : captures) {
    if (lc.label == Label::failure) continue;
    std::string key;
    for (const PacketRecord& rec : lc.capture.packets)
      for (const FieldEntry& f : rec.fields)
        if (f.name == "sip.status-code" || f.name == "sip.method") key += f.value + "|";
    success_keys.insert(key);
  }
  for (const LabeledCapture& lc : captures) {
    if (lc.label == Label::success) continue;
    CHECK(!lc.planted_frames.empty());
    std::string key;
    for (const PacketRecord& rec : lc.capture.packets)
      for (const FieldEntry& f : rec.fields)
        if (f.name == "sip.status-code" || f.name == "sip.method") key += f.value + "|";
    CHECK(success_keys.count(key) == 0);
  }
}

TEST_CASE("failure captures introduce words absent from the success corpus") {
  auto captures = generate(FlowGrammar{}, 40, 40, 11);
  std::set<std::string> success_words;
  for (const LabeledCapture& lc : captures)
    if (lc.label == Label::success)
      for (const std::string& w : serialized_words(lc)) success_words.insert(w);

  int failures_with_new_words = 0;
  int error_failures = 0;
  std::set<std::string> novel;
  for (const LabeledCapture& lc : captures) {
    if (lc.label == Label::success) continue;
    bool has_error_status = false;
    for (const PacketRecord& rec : lc.capture.packets)
      for (const FieldEntry& f : rec.fields)
        if (f.name == "sip.status-code" && std::stoi(f.value) >= 400) has_error_status = true;
    if (!has_error_status) continue;
    ++error_failures;
    bool any_new = false;
    for (const std::string& w : serialized_words(lc))
      if (!success_words.count(w)) {
        any_new = true;
        novel.insert(w);
      }
    if (any_new) ++failures_with_new_words;
  }
  REQUIRE(error_failures > 0);
  CHECK(failures_with_new_words == error_failures);
  // The vocabulary diff contains the expected status tokens.
  bool has_5xx_word = false;
  for (const std::string& w : novel)
    if (w == "500" || w == "503" || w == "486" || w == "480" || w == "600") has_5xx_word = true;
  CHECK(has_5xx_word);
}

TEST_CASE("generation is deterministic in the seed") {
  auto a = generate(FlowGrammar{}, 5, 5, 99);
  auto b = generate(FlowGrammar{}, 5, 5, 99);
  auto c = generate(FlowGrammar{}, 5, 5, 100);
  REQUIRE(a.size() == b.size());
  bool any_diff_c = false;
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(encode_pcap_bytes(a[i].capture) == encode_pcap_bytes(b[i].capture));
    CHECK(a[i].planted_frames == b[i].planted_frames);
    if (encode_pcap_bytes(a[i].capture) != encode_pcap_bytes(c[i].capture)) any_diff_c = true;
  }
  CHECK(any_diff_c);
}

TEST_CASE("planted frames always reference frames present in the capture") {
  auto captures = generate(FlowGrammar{}, 0, 50, 13);
  for (const LabeledCapture& lc : captures) {
    for (uint32_t frame : lc.planted_frames) {
      CHECK(frame >= 1);
      CHECK(frame <= lc.capture.packets.size());
    }
  }
}

TEST_CASE("split mirrors the balanced-validation design") {
  auto captures = generate(FlowGrammar{}, 12, 4, 5);
  CorpusSplit parts = split(captures, {0.5, 0.25, 0.25}, 17);
  CHECK(parts.train.size() == 8);
  CHECK(parts.val.size() == 4);
  CHECK(parts.test.size() == 4);
  for (const LabeledCapture& lc : parts.train) CHECK(lc.label == Label::success);
  auto count_failures = [](const std::vector<LabeledCapture>& list) {
    int n = 0;
    for (const auto& lc : list)
      if (lc.label == Label::failure) ++n;
    return n;
  };
  CHECK(count_failures(parts.val) == 2);
  CHECK(count_failures(parts.test) == 2);

  // Deterministic and disjoint.
  CorpusSplit again = split(captures, {0.5, 0.25, 0.25}, 17);
  CHECK(again.train.size() == parts.train.size());
  std::set<std::string> seen;
  for (const auto* list : {&parts.train, &parts.val, &parts.test})
    for (const LabeledCapture& lc : *list) CHECK(seen.insert(lc.capture.path).second);
  CHECK(seen.size() == captures.size());

  for (size_t i = 0; i < parts.val.size(); ++i)
    CHECK(parts.val[i].capture.path == again.val[i].capture.path);
}

TEST_CASE("split rejects impossible requests") {
  auto captures = generate(FlowGrammar{}, 2, 8, 5);
  try {
    split(captures, {0.5, 0.25, 0.25}, 1);
    FAIL("expected InsufficientCaptures");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::insufficient_captures);
  }
  try {
    split(captures, {0.5, 0.25}, 1);
    FAIL("expected BadConfig");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::bad_config);
  }
}

TEST_CASE("synthetic pcaps run the whole ingest path") {
  auto captures = generate(FlowGrammar{}, 3, 3, 21);
  for (const LabeledCapture& lc : captures) {
    std::vector<uint8_t> bytes = encode_pcap_bytes(lc.capture);
    CaptureFile back = parse_pcap_bytes(bytes, lc.capture.path);
    REQUIRE(back.packets.size() == lc.capture.packets.size());
    CHECK(encode_pcap_bytes(back) == bytes);
    for (size_t i = 0; i < back.packets.size(); ++i) {
      CHECK(back.packets[i].fields == lc.capture.packets[i].fields);
      CHECK(back.packets[i].protocols == lc.capture.packets[i].protocols);
      bool is_sip = false;
      for (const std::string& proto : back.packets[i].protocols)
        if (proto == "sip") is_sip = true;
      CHECK(is_sip);
    }
  }
}
