#pragma once

// Perplexity evaluation and storage accounting.

#include <cstdint>
#include <string>
#include <vector>

#include "tsrq/container.hpp"
#include "tsrq/data.hpp"
#include "tsrq/model.hpp"

namespace tsrq {

// exp of the mean next-token negative log likelihood over all segments
// (or the first max_segments when > 0); act_bits > 0 applies per-token
// activation fake-quant inside every block
double perplexity(const DecoderModel& m, const TokenDataset& data,
                  int act_bits = 0, int64_t max_segments = 0);

struct FootprintEntry {
  std::string name;
  bool quantized = false;
  int64_t cols = 0;
  int64_t f32_bytes = 0;     // numel * 4
  int64_t stored_bytes = 0;  // packed codes + scales + zeros + factor logits
};

struct Footprint {
  std::vector<FootprintEntry> entries;
  int64_t total_f32() const;
  int64_t total_stored() const;
};

Footprint container_footprint(const Container& c);

}  // namespace tsrq
