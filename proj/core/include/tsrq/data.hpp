#pragma once

// Token datasets for training, calibration, and perplexity evaluation.
// Tokens are byte-level (vocab 256) for text corpora, or arbitrary ids
// read from a little-endian u16 file. Only whole fixed-length segments
// are kept; the trailing remainder is dropped.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tsrq {

enum class CorpusFormat { kText, kTokensU16 };

struct TokenDataset {
  std::vector<int32_t> tokens;
  int64_t seq_len = 0;

  int64_t num_segments() const;
  std::span<const int32_t> segment(int64_t i) const;
  uint64_t fingerprint() const;
};

// validates every id against vocab_size and drops the partial tail
TokenDataset dataset_from_tokens(std::vector<int32_t> tokens, int64_t seq_len,
                                 int64_t vocab_size);

TokenDataset ingest_text(const std::string& path, int64_t seq_len,
                         int64_t vocab_size, CorpusFormat format);

// deterministic corpus with enough repeating structure that a small
// decoder reaches low perplexity quickly
std::string make_patterned_text(int64_t n_bytes, uint64_t seed);
std::vector<int32_t> make_patterned_tokens(int64_t n_tokens,
                                           int64_t vocab_size, uint64_t seed);

}  // namespace tsrq
