#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcaplm/represent.hpp"

namespace pcaplm {

// Subword vocabulary. Ids 0-3 are fixed specials; the rest are pieces
// produced by frequency merges. Word-initial pieces carry the U+2581 marker,
// continuations are bare, so any literal text (including the "## frame"
// boundary marker) round-trips without ambiguity.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;
  static constexpr int mask_id = 2;
  static constexpr int redacted_id = 3;
  static constexpr const char* kWordStart = "\xe2\x96\x81";  // U+2581

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Piece lookup for segmentation; specials and [unusedN] fillers are not
  // matchable pieces.
  int piece_id(const std::string& piece) const;
  uint64_t hash() const;

  uint64_t seed = 0;
  uint64_t corpus_hash = 0;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Greedy highest-frequency merge training over whitespace-split words.
// Produces exactly target_size entries (padded with [unusedN] if needed).
Vocabulary train_vocab(const std::vector<SerializedCapture>& corpus, int target_size,
                       uint64_t seed = 0);

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

struct Chunk {
  std::string capture_id;
  int chunk_index = 0;
  std::vector<int> token_ids;  // length == chunk_size exactly
  int pad_count = 0;           // trailing pad_id positions
  uint32_t first_frame = 0;
  uint32_t last_frame = 0;

  int non_pad() const { return static_cast<int>(token_ids.size()) - pad_count; }
};

// Split a raw id sequence into fixed-size chunks, padding only the last.
std::vector<Chunk> chunk(const std::vector<int>& ids, int chunk_size);

// Tokenize a serialized capture line by line and chunk the stream, carrying
// frame provenance into each chunk's frame span.
std::vector<Chunk> chunk_capture(const SerializedCapture& sc, const Vocabulary& vocab,
                                 int chunk_size);

struct MaskedChunk {
  Chunk chunk;  // token_ids hold mask_id at masked positions
  std::vector<int> masked_positions;  // sorted ascending, never pad positions
  std::vector<int> original_ids;      // aligned with masked_positions
};

// round-half-up(rate * non_pad), floored at 1 and capped at non_pad.
int mask_count_for(int non_pad_len, double mask_rate);

// Masking is a pure function of (seed, capture_id, chunk_index).
MaskedChunk mask(const Chunk& chunk, double mask_rate, uint64_t seed);

// Vocabulary file: one header comment line, then one token per line
// (line k+2 holds token id k).
void save_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);

// Chunk store: versioned header, then one tab-separated record per chunk.
void save_chunks(const std::vector<Chunk>& chunks, const std::string& path);
std::vector<Chunk> load_chunks(const std::string& path);

}  // namespace pcaplm
