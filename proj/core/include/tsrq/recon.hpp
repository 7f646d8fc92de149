#pragma once

// Sequential per-block calibration: capture each block's inputs and
// full-precision outputs, train the rounding and dequant-factor logits
// to minimize the block reconstruction error while progressively
// freezing decided variables, then merge and export packed weights.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsrq/data.hpp"
#include "tsrq/model.hpp"
#include "tsrq/quant.hpp"
#include "tsrq/rounding.hpp"

namespace tsrq {

struct BlockCapture {
  std::vector<Tensor> inputs;   // per calibration segment, [seq_len, d]
  std::vector<Tensor> targets;  // full-precision block outputs on inputs
};

struct LayerFlips {
  std::string name;
  int64_t count = 0;
  int64_t total = 0;
  double percent = 0.0;
};

struct ReconReport {
  int64_t block_index = 0;
  double initial_loss = 0.0;  // nearest-rounding baseline on the capture
  double final_loss = 0.0;    // after full hardening, factors applied
  std::vector<LayerFlips> flips;
  std::vector<double> loss_trace;  // minibatch loss every log_interval steps
  double seconds = 0.0;
};

struct ParOptions {
  std::vector<double> schedule;  // cumulative hardening percents per iteration
  int64_t steps_per_iter = 250;
  int64_t batch_size = 4;
  float lr = 1e-3f;
  bool dst_enabled = true;
  float dst_weight_decay = 1e-4f;
  int act_bits = 0;  // > 0 fake-quantizes activations in every forward
  uint64_t seed = 0;
  int64_t log_interval = 25;
};

// mean over sample pairs of the squared Frobenius distance
Tensor reconstruction_loss(Tape& tape, std::span<const Tensor> outs,
                           std::span<const Tensor> targets);
double reconstruction_loss_value(std::span<const Tensor> outs,
                                 std::span<const Tensor> targets);

// Runs the calibration segments through blocks [0, block_index) of the
// given model (which reflects any quantization applied so far) and pairs
// the resulting inputs with the outputs of the still-unmodified block.
BlockCapture capture_block_io(const DecoderModel& m, int64_t block_index,
                              const TokenDataset& calib, int64_t max_segments,
                              int act_bits = 0);

struct BlockResult {
  // both indexed like kBlockLinearNames
  std::vector<QuantizedTensor> quantized;
  std::vector<Tensor> merged;
  ReconReport report;
};

// layer_specs holds one QuantSpec per block projection (size 7)
BlockResult optimize_block(const DecoderConfig& cfg, const BlockWeights& bw,
                           const BlockCapture& cap,
                           std::span<const QuantSpec> layer_specs,
                           const ParOptions& opts);

struct QuantizeModelOptions {
  QuantSpec spec;
  ParOptions par;
  int64_t calib_segments = 16;  // 0 = all
  bool fp_propagation = false;  // capture through original fp blocks
  int search_clip_grid = 0;     // per-layer clipping search, 0 = off
  bool rtn_only = false;        // nearest rounding, no optimization
};

struct QuantizeModelResult {
  Container container;
  std::vector<ReconReport> reports;
};

// meta_json, when non-empty, must be a json object; it is embedded in the
// output container next to the model config
QuantizeModelResult quantize_model(const DecoderModel& m,
                                   const TokenDataset& calib,
                                   const QuantizeModelOptions& opts,
                                   const std::string& meta_json = "");

// positions whose codes differ; mismatched layout is an argument error
std::pair<int64_t, double> count_flips(const QuantizedTensor& a,
                                       const QuantizedTensor& b);

}  // namespace tsrq
