#include "tsrq/data.hpp"

#include <cstdio>
#include <string>

#include "tsrq/errors.hpp"
#include "tsrq/rng.hpp"

namespace tsrq {

int64_t TokenDataset::num_segments() const {
  if (seq_len <= 0) return 0;
  return static_cast<int64_t>(tokens.size()) / seq_len;
}

std::span<const int32_t> TokenDataset::segment(int64_t i) const {
  if (i < 0 || i >= num_segments()) {
    throw ArgumentError("dataset: segment index out of range");
  }
  return {tokens.data() + i * seq_len, static_cast<size_t>(seq_len)};
}

uint64_t TokenDataset::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  mix(static_cast<uint64_t>(seq_len));
  for (int32_t t : tokens) mix(static_cast<uint64_t>(static_cast<uint32_t>(t)));
  return h;
}

TokenDataset dataset_from_tokens(std::vector<int32_t> tokens, int64_t seq_len,
                                 int64_t vocab_size) {
  if (seq_len < 2) throw ArgumentError("dataset: seq_len must be >= 2");
  if (vocab_size < 1) throw ArgumentError("dataset: vocab_size must be >= 1");
  if (tokens.empty()) throw DataError("dataset: no tokens");
  for (int32_t t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw DataError("dataset: token id " + std::to_string(t) +
                      " outside vocab of " + std::to_string(vocab_size));
    }
  }
  TokenDataset ds;
  ds.seq_len = seq_len;
  tokens.resize(static_cast<size_t>((tokens.size() / seq_len) * seq_len));
  ds.tokens = std::move(tokens);
  return ds;
}

TokenDataset ingest_text(const std::string& path, int64_t seq_len,
                         int64_t vocab_size, CorpusFormat format) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("dataset: cannot open " + path);
  std::string bytes;
  char buf[1 << 16];
  size_t got;
  while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) {
    bytes.append(buf, got);
  }
  const bool read_err = std::ferror(f) != 0;
  std::fclose(f);
  if (read_err) throw IoError("dataset: read failed on " + path);
  if (bytes.empty()) throw DataError("dataset: " + path + " is empty");

  std::vector<int32_t> tokens;
  if (format == CorpusFormat::kText) {
    tokens.reserve(bytes.size());
    for (unsigned char c : bytes) tokens.push_back(static_cast<int32_t>(c));
  } else {
    if (bytes.size() % 2 != 0) {
      throw DataError("dataset: u16 token file has an odd byte count");
    }
    tokens.reserve(bytes.size() / 2);
    for (size_t i = 0; i < bytes.size(); i += 2) {
      const uint32_t lo = static_cast<unsigned char>(bytes[i]);
      const uint32_t hi = static_cast<unsigned char>(bytes[i + 1]);
      tokens.push_back(static_cast<int32_t>(lo | (hi << 8)));
    }
  }
  return dataset_from_tokens(std::move(tokens), seq_len, vocab_size);
}

std::string make_patterned_text(int64_t n_bytes, uint64_t seed) {
  if (n_bytes < 1) throw ArgumentError("corpus: size must be >= 1");
  static const char* const kNouns[] = {"fox",  "owl",  "elk",
                                       "bee",  "ant",  "ram"};
  static const char* const kVerbs[] = {"jumps", "walks", "sleeps", "sings"};
  Rng rng(seed);
  // a seeded but fixed rotation through the template slots keeps the
  // stream deterministic and highly predictable once the cycle is seen
  const uint64_t noun_step = 1 + rng.uniform_int(5);
  const uint64_t verb_step = 1 + rng.uniform_int(3);
  std::string out;
  out.reserve(static_cast<size_t>(n_bytes) + 64);
  uint64_t i = 0;
  while (static_cast<int64_t>(out.size()) < n_bytes) {
    const char* noun = kNouns[(i * noun_step) % 6];
    const char* verb = kVerbs[(i * verb_step) % 4];
    char line[64];
    std::snprintf(line, sizeof(line), "item %03d: the grey %s %s at dawn\n",
                  static_cast<int>(i % 1000), noun, verb);
    out += line;
    ++i;
  }
  out.resize(static_cast<size_t>(n_bytes));
  return out;
}

std::vector<int32_t> make_patterned_tokens(int64_t n_tokens,
                                           int64_t vocab_size, uint64_t seed) {
  if (n_tokens < 1) throw ArgumentError("corpus: size must be >= 1");
  if (vocab_size < 8) throw ArgumentError("corpus: vocab must be >= 8");
  Rng rng(seed);
  const int32_t sep = static_cast<int32_t>(vocab_size - 1);
  const int64_t span = vocab_size - 2;  // ids 0..span-1 form the runs
  const int64_t run_len = 12;
  const uint64_t start_step = 3 + rng.uniform_int(4);
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(n_tokens) + run_len + 1);
  uint64_t sentence = 0;
  while (static_cast<int64_t>(out.size()) < n_tokens) {
    out.push_back(sep);
    const int64_t start =
        static_cast<int64_t>((sentence * start_step) % static_cast<uint64_t>(span));
    for (int64_t j = 0; j < run_len; ++j) {
      out.push_back(static_cast<int32_t>((start + j) % span));
    }
    ++sentence;
  }
  out.resize(static_cast<size_t>(n_tokens));
  return out;
}

}  // namespace tsrq
