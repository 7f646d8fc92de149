#pragma once

// Next-token training for the toy decoder, enough to produce a
// full-precision checkpoint whose quantization behavior is interesting.

#include <cstdint>

#include "tsrq/data.hpp"
#include "tsrq/model.hpp"

namespace tsrq {

struct TrainOptions {
  int64_t steps = 1200;
  int64_t batch_size = 4;
  float lr = 1e-3f;
  uint64_t seed = 0;
  int64_t log_interval = 0;  // 0 = silent; otherwise prints a loss line
};

struct TrainResult {
  double final_loss = 0.0;  // mean train loss over the last 50 steps
  int64_t steps = 0;
};

// trains in place; gradient flags are cleared again before returning
TrainResult train_toy(DecoderModel& model, const TokenDataset& data,
                      const TrainOptions& opts);

}  // namespace tsrq
