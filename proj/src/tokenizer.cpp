#include "pcaplm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

const char* kSpecials[4] = {"[PAD]", "[UNK]", "[MASK]", "[REDACTED]"};

bool is_special_or_filler(const std::string& tok) {
  for (const char* s : kSpecials)
    if (tok == s) return true;
  return tok.rfind("[unused", 0) == 0 && tok.back() == ']';
}

// Split a UTF-8 string into code points (as byte strings). Invalid bytes are
// kept as single-byte units so nothing is ever dropped.
std::vector<std::string> utf8_codepoints(std::string_view word) {
  std::vector<std::string> cps;
  for (size_t i = 0; i < word.size();) {
    unsigned char c = static_cast<unsigned char>(word[i]);
    size_t len = 1;
    if ((c & 0xf8) == 0xf0)
      len = 4;
    else if ((c & 0xf0) == 0xe0)
      len = 3;
    else if ((c & 0xe0) == 0xc0)
      len = 2;
    if (i + len > word.size()) len = 1;
    cps.emplace_back(word.substr(i, len));
    i += len;
  }
  return cps;
}

struct TrainingWord {
  std::vector<int> symbols;  // indices into the symbol table
  int64_t count = 0;
};

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    const std::string& tok = tokens_[i];
    if (i >= 4 && !is_special_or_filler(tok)) index_.emplace(tok, static_cast<int>(i));
  }
}

int Vocabulary::piece_id(const std::string& piece) const {
  auto it = index_.find(piece);
  return it == index_.end() ? -1 : it->second;
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 14695981039346656037ull;
  for (const std::string& tok : tokens_) {
    h = fnv1a64(tok, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

Vocabulary train_vocab(const std::vector<SerializedCapture>& corpus, int target_size,
                       uint64_t seed) {
  if (corpus.empty()) fail(Errc::empty_corpus, "no serialized captures to train on");
  // The pipeline config enforces >= 16; tiny sizes stay legal here so the
  // smallest corpora remain expressible.
  if (target_size < 5) fail(Errc::bad_config, "vocabulary needs room beyond the four specials");

  uint64_t corpus_hash = 14695981039346656037ull;

  // Word frequencies in first-seen order.
  std::vector<std::string> word_order;
  std::unordered_map<std::string, int64_t> word_count;
  for (const SerializedCapture& sc : corpus) {
    for (const ReprLine& line : sc.lines) {
      corpus_hash = fnv1a64(line.text, corpus_hash);
      corpus_hash = fnv1a64("\n", corpus_hash);
      for (std::string& w : split_ws(line.text)) {
        if (w == kSpecials[3]) continue;  // [REDACTED] is always one token
        auto [it, inserted] = word_count.try_emplace(w, 0);
        if (inserted) word_order.push_back(w);
        ++it->second;
      }
    }
  }

  // Symbol table: word-initial code points carry the marker, continuations
  // are bare. Symbols are interned in first-seen order.
  std::vector<std::string> symbols;
  std::vector<int64_t> symbol_freq;
  std::unordered_map<std::string, int> symbol_index;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_index.try_emplace(s, static_cast<int>(symbols.size()));
    if (inserted) {
      symbols.push_back(s);
      symbol_freq.push_back(0);
    }
    return it->second;
  };

  std::vector<TrainingWord> words;
  words.reserve(word_order.size());
  for (const std::string& w : word_order) {
    TrainingWord tw;
    tw.count = word_count[w];
    auto cps = utf8_codepoints(w);
    for (size_t i = 0; i < cps.size(); ++i) {
      int sym = intern(i == 0 ? Vocabulary::kWordStart + cps[i] : cps[i]);
      tw.symbols.push_back(sym);
      symbol_freq[static_cast<size_t>(sym)] += tw.count;
    }
    words.push_back(std::move(tw));
  }

  int alphabet_budget = target_size - 4;
  std::vector<int> alphabet(symbols.size());
  for (size_t i = 0; i < alphabet.size(); ++i) alphabet[i] = static_cast<int>(i);
  if (static_cast<int>(alphabet.size()) > alphabet_budget) {
    // Rare case: keep the most frequent characters, ties by first-seen order.
    std::stable_sort(alphabet.begin(), alphabet.end(), [&](int a, int b) {
      return symbol_freq[static_cast<size_t>(a)] > symbol_freq[static_cast<size_t>(b)];
    });
    alphabet.resize(static_cast<size_t>(alphabet_budget));
    std::sort(alphabet.begin(), alphabet.end());
  }
  std::vector<bool> in_vocab(symbols.size(), false);
  std::vector<std::string> pieces;
  for (int sym : alphabet) {
    in_vocab[static_cast<size_t>(sym)] = true;
    pieces.push_back(symbols[static_cast<size_t>(sym)]);
  }
  // Words containing a dropped character cannot participate in merges.
  for (TrainingWord& tw : words) {
    bool ok = true;
    for (int sym : tw.symbols)
      if (!in_vocab[static_cast<size_t>(sym)]) ok = false;
    if (!ok) tw.symbols.clear();
  }

  // Iterative merges: repeatedly join the most frequent adjacent pair.
  // Ties break on the lower symbol ids, so training is deterministic.
  while (static_cast<int>(pieces.size()) + 4 < target_size) {
    std::map<std::pair<int, int>, int64_t> pair_freq;
    for (const TrainingWord& tw : words)
      for (size_t i = 0; i + 1 < tw.symbols.size(); ++i)
        pair_freq[{tw.symbols[i], tw.symbols[i + 1]}] += tw.count;
    if (pair_freq.empty()) break;
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;
    auto [left, right] = best->first;
    int merged =
        intern(symbols[static_cast<size_t>(left)] + symbols[static_cast<size_t>(right)]);
    if (static_cast<size_t>(merged) >= in_vocab.size()) in_vocab.resize(symbols.size(), false);
    if (!in_vocab[static_cast<size_t>(merged)]) {
      in_vocab[static_cast<size_t>(merged)] = true;
      pieces.push_back(symbols[static_cast<size_t>(merged)]);
    }
    for (TrainingWord& tw : words) {
      auto& sy = tw.symbols;
      for (size_t i = 0; i + 1 < sy.size();) {
        if (sy[i] == left && sy[i + 1] == right) {
          sy[i] = merged;
          sy.erase(sy.begin() + static_cast<long>(i) + 1);
        } else {
          ++i;
        }
      }
    }
  }

  std::vector<std::string> tokens;
  tokens.reserve(static_cast<size_t>(target_size));
  for (const char* s : kSpecials) tokens.emplace_back(s);
  tokens.insert(tokens.end(), pieces.begin(), pieces.end());
  int filler = 0;
  while (static_cast<int>(tokens.size()) < target_size)
    tokens.push_back("[unused" + std::to_string(filler++) + "]");

  Vocabulary vocab(std::move(tokens));
  vocab.seed = seed;
  vocab.corpus_hash = corpus_hash;
  return vocab;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const std::string& word : split_ws(text)) {
    if (word == kSpecials[3]) {
      ids.push_back(Vocabulary::redacted_id);
      continue;
    }
    // Greedy longest-match over the marked form. Specials (notably a literal
    // "[MASK]") are not matchable pieces, so raw text cannot mint them.
    std::string marked = Vocabulary::kWordStart + word;
    std::vector<int> word_ids;
    size_t pos = 0;
    bool bad = false;
    while (pos < marked.size()) {
      int found = -1;
      size_t found_len = 0;
      for (size_t len = marked.size() - pos; len >= 1; --len) {
        int id = vocab.piece_id(marked.substr(pos, len));
        if (id >= 0) {
          found = id;
          found_len = len;
          break;
        }
      }
      if (found < 0) {
        bad = true;
        break;
      }
      word_ids.push_back(found);
      pos += found_len;
    }
    if (bad)
      ids.push_back(Vocabulary::unk_id);
    else
      ids.insert(ids.end(), word_ids.begin(), word_ids.end());
  }
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  auto append_word = [&](const std::string& w) {
    if (!out.empty()) out += ' ';
    out += w;
  };
  const std::string marker = Vocabulary::kWordStart;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size())
      fail(Errc::id_out_of_range, "token id " + std::to_string(id));
    if (id == Vocabulary::pad_id) continue;
    const std::string& tok = vocab.token(id);
    if (id == Vocabulary::unk_id || id == Vocabulary::mask_id || id == Vocabulary::redacted_id ||
        is_special_or_filler(tok)) {
      append_word(tok);
      continue;
    }
    if (tok.rfind(marker, 0) == 0)
      append_word(tok.substr(marker.size()));
    else
      out += tok;  // continuation piece
  }
  return out;
}

std::vector<Chunk> chunk(const std::vector<int>& ids, int chunk_size) {
  if (chunk_size < 2) fail(Errc::bad_config, "chunk size must be >= 2");
  std::vector<Chunk> chunks;
  for (size_t off = 0; off < ids.size(); off += static_cast<size_t>(chunk_size)) {
    Chunk c;
    c.chunk_index = static_cast<int>(chunks.size());
    size_t take = std::min(ids.size() - off, static_cast<size_t>(chunk_size));
    c.token_ids.assign(ids.begin() + static_cast<long>(off),
                       ids.begin() + static_cast<long>(off + take));
    c.token_ids.resize(static_cast<size_t>(chunk_size), Vocabulary::pad_id);
    c.pad_count = chunk_size - static_cast<int>(take);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

std::vector<Chunk> chunk_capture(const SerializedCapture& sc, const Vocabulary& vocab,
                                 int chunk_size) {
  std::vector<int> ids;
  std::vector<uint32_t> frames;
  for (const ReprLine& line : sc.lines) {
    std::vector<int> line_ids = tokenize(line.text, vocab);
    ids.insert(ids.end(), line_ids.begin(), line_ids.end());
    frames.insert(frames.end(), line_ids.size(), line.frame_no);
  }
  std::vector<Chunk> chunks = chunk(ids, chunk_size);
  for (Chunk& c : chunks) {
    c.capture_id = sc.capture_id;
    size_t begin = static_cast<size_t>(c.chunk_index) * static_cast<size_t>(chunk_size);
    size_t end = begin + static_cast<size_t>(c.non_pad());
    if (begin < end) {
      c.first_frame = frames[begin];
      c.last_frame = frames[end - 1];
    }
  }
  return chunks;
}

int mask_count_for(int non_pad_len, double mask_rate) {
  int count = static_cast<int>(std::floor(mask_rate * non_pad_len + 0.5));
  count = std::max(count, 1);
  return std::min(count, non_pad_len);
}

MaskedChunk mask(const Chunk& chunk, double mask_rate, uint64_t seed) {
  if (mask_rate <= 0.0 || mask_rate >= 1.0)
    fail(Errc::bad_config, "mask rate must lie strictly between 0 and 1");
  int non_pad = chunk.non_pad();
  if (non_pad <= 0) fail(Errc::all_pad, "chunk " + std::to_string(chunk.chunk_index) +
                                            " of " + chunk.capture_id + " has no tokens");
  int count = mask_count_for(non_pad, mask_rate);

  DetRng rng(mix64(mix64(seed, fnv1a64(chunk.capture_id)),
                   static_cast<uint64_t>(chunk.chunk_index)));
  // Partial Fisher-Yates: the first `count` entries are a uniform sample
  // without replacement.
  std::vector<int> positions(static_cast<size_t>(non_pad));
  for (int i = 0; i < non_pad; ++i) positions[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    int j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(non_pad - i)));
    std::swap(positions[static_cast<size_t>(i)], positions[static_cast<size_t>(j)]);
  }
  positions.resize(static_cast<size_t>(count));
  std::sort(positions.begin(), positions.end());

  MaskedChunk mc;
  mc.chunk = chunk;
  mc.masked_positions = std::move(positions);
  mc.original_ids.reserve(static_cast<size_t>(count));
  for (int pos : mc.masked_positions) {
    mc.original_ids.push_back(mc.chunk.token_ids[static_cast<size_t>(pos)]);
    mc.chunk.token_ids[static_cast<size_t>(pos)] = Vocabulary::mask_id;
  }
  return mc;
}

void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  char header[128];
  std::snprintf(header, sizeof header, "# pcaplm-vocab v1 size=%d seed=%llu corpus=%016llx",
                vocab.size(), static_cast<unsigned long long>(vocab.seed),
                static_cast<unsigned long long>(vocab.corpus_hash));
  out << header << '\n';
  for (const std::string& tok : vocab.tokens()) out << tok << '\n';
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  std::string header;
  if (!std::getline(in, header) || header.rfind("# pcaplm-vocab", 0) != 0)
    fail(Errc::io_failure, path + ": not a vocabulary file");
  uint64_t seed = 0, corpus = 0;
  for (const std::string& part : split_ws(header)) {
    if (part.rfind("seed=", 0) == 0) seed = std::stoull(part.substr(5));
    if (part.rfind("corpus=", 0) == 0) corpus = std::stoull(part.substr(7), nullptr, 16);
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  Vocabulary vocab(std::move(tokens));
  vocab.seed = seed;
  vocab.corpus_hash = corpus;
  return vocab;
}

void save_chunks(const std::vector<Chunk>& chunks, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  out << "# pcaplm-chunks v1\n";
  for (const Chunk& c : chunks) {
    out << c.capture_id << '\t' << c.chunk_index << '\t' << c.pad_count << '\t' << c.first_frame
        << '\t' << c.last_frame << '\t';
    for (size_t i = 0; i < c.token_ids.size(); ++i) {
      if (i) out << ',';
      out << c.token_ids[i];
    }
    out << '\n';
  }
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

std::vector<Chunk> load_chunks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# pcaplm-chunks", 0) != 0)
    fail(Errc::io_failure, path + ": not a chunk store");
  std::vector<Chunk> chunks;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto parts = split_char(line, '\t');
    if (parts.size() != 6) fail(Errc::io_failure, path + ": malformed chunk record");
    Chunk c;
    c.capture_id = parts[0];
    c.chunk_index = std::stoi(parts[1]);
    c.pad_count = std::stoi(parts[2]);
    c.first_frame = static_cast<uint32_t>(std::stoul(parts[3]));
    c.last_frame = static_cast<uint32_t>(std::stoul(parts[4]));
    for (const std::string& id : split_char(parts[5], ','))
      if (!id.empty()) c.token_ids.push_back(std::stoi(id));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

}  // namespace pcaplm
