#include "pcaplm/tokenizer.hpp"

#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

using namespace pcaplm;

namespace {

SerializedCapture capture_of_lines(const std::vector<std::string>& lines,
                                   const std::string& id = "c0") {
  SerializedCapture sc;
  sc.capture_id = id;
  sc.kind = ReprKind::PCT_DICT;
  uint32_t frame = 1;
  for (const std::string& text : lines) sc.lines.push_back({frame++, text});
  return sc;
}

std::vector<SerializedCapture> tiny_corpus() {
  return {capture_of_lines({
      "## frame 1",
      "frame.protocols: eth:ipv4:udp:sip",
      "sip.request-line.printable_value: invite sip:alice@example.net sip/2.0",
      "sip.cseq: 1 invite",
      "## frame 2",
      "sip.status-line.printable_value: sip/2.0 200 ok",
      "sip.cseq: 1 invite",
      "value [REDACTED] value",
  })};
}

// Oracle: the normalized word stream of a text.
std::vector<std::string> word_oracle(const std::string& text) { return split_ws(text); }

}  // namespace

TEST_CASE("specials occupy fixed ids") {
  Vocabulary v = train_vocab(tiny_corpus(), 64, 0);
  CHECK(v.token(Vocabulary::pad_id) == "[PAD]");
  CHECK(v.token(Vocabulary::unk_id) == "[UNK]");
  CHECK(v.token(Vocabulary::mask_id) == "[MASK]");
  CHECK(v.token(Vocabulary::redacted_id) == "[REDACTED]");
  CHECK(v.size() == 64);
}

TEST_CASE("trivial corpus: vocabulary contains the word plus specials") {
  auto corpus = std::vector<SerializedCapture>{capture_of_lines({"a a a"})};
  Vocabulary v = train_vocab(corpus, 8, 0);
  CHECK(v.size() == 8);
  bool has_a = false;
  for (const std::string& tok : v.tokens())
    if (tok == std::string(Vocabulary::kWordStart) + "a") has_a = true;
  CHECK(has_a);
  CHECK(tokenize("a", v) != std::vector<int>{Vocabulary::unk_id});
}

TEST_CASE("same corpus and seed give identical vocabularies") {
  Vocabulary a = train_vocab(tiny_corpus(), 128, 7);
  Vocabulary b = train_vocab(tiny_corpus(), 128, 7);
  CHECK(a.tokens() == b.tokens());
  CHECK(a.hash() == b.hash());
}

TEST_CASE("character coverage: corpus text never tokenizes to UNK") {
  Vocabulary v = train_vocab(tiny_corpus(), 256, 0);
  // Oracle: every character of the corpus is in some piece, so no word may
  // resolve to UNK.
  for (const SerializedCapture& sc : tiny_corpus())
    for (const ReprLine& line : sc.lines)
      for (int id : tokenize(line.text, v)) CHECK(id != Vocabulary::unk_id);
}

TEST_CASE("empty corpus is an error") {
  try {
    train_vocab({}, 64, 0);
    FAIL("expected EmptyCorpus");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_corpus);
  }
}

TEST_CASE("tokenize basics") {
  Vocabulary v = train_vocab(tiny_corpus(), 256, 0);
  CHECK(tokenize("", v).empty());
  CHECK(tokenize("[REDACTED]", v) == std::vector<int>{Vocabulary::redacted_id});
  // A literal [MASK] in raw text must not mint the mask id.
  for (int id : tokenize("[MASK]", v)) CHECK(id != Vocabulary::mask_id);
  // Unknown characters collapse the word to UNK.
  CHECK(tokenize("\xd0\xb6", v) == std::vector<int>{Vocabulary::unk_id});
}

TEST_CASE("detokenize(tokenize(x)) is whitespace-normalized identity on corpus lines") {
  Vocabulary v = train_vocab(tiny_corpus(), 512, 0);
  DetRng rng(11);
  const auto corpus = tiny_corpus();
  std::vector<std::string> pool;
  for (const auto& sc : corpus)
    for (const auto& line : sc.lines) pool.push_back(line.text);
  for (int i = 0; i < 1000; ++i) {
    // Random lines recombined from corpus words.
    std::string text = pool[rng.next_below(pool.size())];
    if (rng.next_below(2)) text += "  " + pool[rng.next_below(pool.size())];
    std::vector<int> ids = tokenize(text, v);
    std::string back = detokenize(ids, v);
    CHECK(word_oracle(back) == word_oracle(text));
    // Fixpoint: tokenizing the detokenization reproduces the ids.
    CHECK(tokenize(back, v) == ids);
  }
}

TEST_CASE("detokenize edge cases") {
  Vocabulary v = train_vocab(tiny_corpus(), 128, 0);
  CHECK(detokenize({Vocabulary::pad_id, Vocabulary::pad_id}, v) == "");
  CHECK(detokenize({Vocabulary::mask_id}, v) == "[MASK]");
  try {
    detokenize({v.size()}, v);
    FAIL("expected IdOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::id_out_of_range);
  }
}

TEST_CASE("chunk arithmetic") {
  std::vector<int> ids(130, 5);
  auto chunks = chunk(ids, 64);
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[0].pad_count == 0);
  CHECK(chunks[1].pad_count == 0);
  CHECK(chunks[2].pad_count == 62);
  CHECK(chunks[2].token_ids.size() == 64);

  CHECK(chunk(std::vector<int>(64, 1), 64).size() == 1);
  CHECK(chunk(std::vector<int>(64, 1), 64)[0].pad_count == 0);
  CHECK(chunk({}, 64).empty());
}

TEST_CASE("chunk reconstruction property") {
  DetRng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    size_t n = rng.next_below(300);
    std::vector<int> ids(n);
    for (auto& id : ids) id = 4 + static_cast<int>(rng.next_below(100));
    int size = 2 + static_cast<int>(rng.next_below(63));
    auto chunks = chunk(ids, size);
    CHECK(chunks.size() == (n + static_cast<size_t>(size) - 1) / static_cast<size_t>(size));
    std::vector<int> rebuilt;
    for (const Chunk& c : chunks) {
      CHECK(static_cast<int>(c.token_ids.size()) == size);
      rebuilt.insert(rebuilt.end(), c.token_ids.begin(),
                     c.token_ids.end() - c.pad_count);
      if (c.pad_count > 0) CHECK(&c == &chunks.back());
    }
    CHECK(rebuilt == ids);
  }
}

TEST_CASE("mask count law: round-half-up with floor 1 across lengths 1..64") {
  for (int len = 1; len <= 64; ++len) {
    // Integer oracle: round-half-up(0.2*len) = floor((2*len+5)/10).
    int expected = std::max(1, (2 * len + 5) / 10);
    CHECK(mask_count_for(len, 0.20) == expected);

    Chunk c;
    c.capture_id = "law";
    c.chunk_index = len;
    c.token_ids.assign(64, 9);
    c.pad_count = 64 - len;
    for (int i = len; i < 64; ++i) c.token_ids[static_cast<size_t>(i)] = Vocabulary::pad_id;
    MaskedChunk mc = mask(c, 0.20, 1);
    CHECK(static_cast<int>(mc.masked_positions.size()) == expected);
    for (int pos : mc.masked_positions) {
      CHECK(pos < len);
      CHECK(mc.chunk.token_ids[static_cast<size_t>(pos)] == Vocabulary::mask_id);
    }
    for (size_t i = 0; i < mc.masked_positions.size(); ++i)
      CHECK(mc.original_ids[i] == 9);
  }
  CHECK(mask_count_for(64, 0.20) == 13);  // round(12.8) = 13
}

TEST_CASE("masking is deterministic in (seed, capture, index)") {
  Chunk c;
  c.capture_id = "det";
  c.chunk_index = 3;
  c.token_ids.assign(64, 7);
  MaskedChunk a = mask(c, 0.2, 99);
  MaskedChunk b = mask(c, 0.2, 99);
  CHECK(a.masked_positions == b.masked_positions);
  MaskedChunk other_seed = mask(c, 0.2, 100);
  CHECK(a.masked_positions != other_seed.masked_positions);
}

TEST_CASE("changing capture_id changes masks with overwhelming probability") {
  Chunk c;
  c.chunk_index = 0;
  c.token_ids.assign(64, 7);
  std::set<std::vector<int>> seen;
  int collisions = 0;
  for (int i = 0; i < 1000; ++i) {
    c.capture_id = "cap" + std::to_string(i);
    MaskedChunk mc = mask(c, 0.2, 5);
    if (!seen.insert(mc.masked_positions).second) ++collisions;
  }
  // 1000 draws of 13-of-64 subsets: any collision at all is overwhelming
  // evidence of seed coupling.
  CHECK(collisions <= 1);
}

TEST_CASE("mask fraction mean over random chunks stays within 0.5% of 20%") {
  DetRng rng(4);
  double total_masked = 0, total_tokens = 0;
  for (int i = 0; i < 10000; ++i) {
    Chunk c;
    c.capture_id = "mc" + std::to_string(i);
    c.token_ids.assign(64, 8);
    int len = 40 + static_cast<int>(rng.next_below(25));
    c.pad_count = 64 - len;
    for (int p = len; p < 64; ++p) c.token_ids[static_cast<size_t>(p)] = Vocabulary::pad_id;
    MaskedChunk mc = mask(c, 0.20, 77);
    total_masked += static_cast<double>(mc.masked_positions.size());
    total_tokens += len;
  }
  double fraction = total_masked / total_tokens;
  CHECK(std::abs(fraction - 0.20) < 0.005);
}

TEST_CASE("all-pad chunk cannot be masked") {
  Chunk c;
  c.capture_id = "pad";
  c.token_ids.assign(64, Vocabulary::pad_id);
  c.pad_count = 64;
  try {
    mask(c, 0.2, 0);
    FAIL("expected AllPad");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::all_pad);
  }
}

TEST_CASE("chunk_capture carries frame spans") {
  Vocabulary v = train_vocab(tiny_corpus(), 256, 0);
  SerializedCapture sc = tiny_corpus()[0];
  auto chunks = chunk_capture(sc, v, 16);
  REQUIRE(!chunks.empty());
  CHECK(chunks.front().first_frame == 1);
  CHECK(chunks.back().last_frame == 8);
  for (const Chunk& c : chunks) {
    CHECK(c.capture_id == "c0");
    CHECK(c.first_frame <= c.last_frame);
  }
  // Reconstruction: concatenation minus padding equals the full stream.
  std::vector<int> full;
  for (const ReprLine& line : sc.lines) {
    auto ids = tokenize(line.text, v);
    full.insert(full.end(), ids.begin(), ids.end());
  }
  std::vector<int> rebuilt;
  for (const Chunk& c : chunks)
    rebuilt.insert(rebuilt.end(), c.token_ids.begin(), c.token_ids.end() - c.pad_count);
  CHECK(rebuilt == full);
}

TEST_CASE("vocabulary and chunk stores round-trip through files") {
  Vocabulary v = train_vocab(tiny_corpus(), 128, 3);
  auto dir = std::filesystem::temp_directory_path() / "pcaplm_test_tok";
  std::filesystem::create_directories(dir);
  std::string vpath = (dir / "vocab.txt").string();
  save_vocab(v, vpath);
  Vocabulary v2 = load_vocab(vpath);
  CHECK(v2.tokens() == v.tokens());
  CHECK(v2.hash() == v.hash());
  CHECK(v2.seed == v.seed);
  CHECK(v2.corpus_hash == v.corpus_hash);

  auto chunks = chunk_capture(tiny_corpus()[0], v, 16);
  std::string cpath = (dir / "chunks.tsv").string();
  save_chunks(chunks, cpath);
  auto chunks2 = load_chunks(cpath);
  REQUIRE(chunks2.size() == chunks.size());
  for (size_t i = 0; i < chunks.size(); ++i) {
    CHECK(chunks2[i].capture_id == chunks[i].capture_id);
    CHECK(chunks2[i].chunk_index == chunks[i].chunk_index);
    CHECK(chunks2[i].token_ids == chunks[i].token_ids);
    CHECK(chunks2[i].pad_count == chunks[i].pad_count);
    CHECK(chunks2[i].first_frame == chunks[i].first_frame);
    CHECK(chunks2[i].last_frame == chunks[i].last_frame);
  }
}

TEST_CASE("per-position mask frequency is uniform within 3 binomial sigma") {
  Chunk c;
  c.token_ids.assign(64, 6);
  const int trials = 100000;
  std::vector<int> counts(64, 0);
  for (int i = 0; i < trials; ++i) {
    c.capture_id = "uni";
    c.chunk_index = i;
    MaskedChunk mc = mask(c, 0.20, 12345);
    for (int pos : mc.masked_positions) ++counts[static_cast<size_t>(pos)];
  }
  const double p = 13.0 / 64.0;
  const double mean = trials * p;
  const double sigma = std::sqrt(trials * p * (1 - p));
  for (int pos = 0; pos < 64; ++pos)
    CHECK(std::abs(counts[static_cast<size_t>(pos)] - mean) <= 3.0 * sigma);
}
