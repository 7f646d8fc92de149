#pragma once

// Learnable rounding state. Each weight element carries a logit nu whose
// sigmoid is the soft rounding offset in (0,1); a value of +inf or -inf
// marks the choice as frozen (round up / round down). Each quantization
// group carries a logit v whose doubled sigmoid scales the dequantization
// step, starting at exactly 1.

#include <cstdint>
#include <string>
#include <vector>

#include "tsrq/quant.hpp"
#include "tsrq/tensor.hpp"

namespace tsrq {

struct LayerRounding {
  std::string name;
  Tensor theta;        // original weights, never mutated
  QuantSpec spec;
  QuantParams params;  // frozen at init; merge and export reuse them
  Tensor nu;           // [out,in] rounding logits, requires_grad
  Tensor dst;          // [out, groups_per_row] factor logits, requires_grad
  Tensor base;         // floor(theta/s) + z per element, constant
  Tensor scale_full;   // group scale broadcast to elements, constant
  Tensor zero_full;    // group zero point broadcast to elements, constant

  int64_t count() const { return nu.numel(); }
  int64_t hardened() const;
};

// Computes group parameters and sets nu = logit(frac(theta/s)), with the
// fraction clamped to [1e-4, 1-1e-4] so every logit starts finite. Soft
// dequantization then reproduces theta up to the clamp guard for every
// weight whose code is strictly interior.
LayerRounding init_layer_rounding(std::string name, const Tensor& theta,
                                  const QuantSpec& spec);

// |sigmoid(nu) - 0.5|: 0 = maximally undecided, 0.5 = fully decided
float hs_score(float nu_value);

// Soft dequantized weights as a differentiable graph:
//   scale * (clamp(base + sigmoid(nu), 0, qmax) - z), times the per-group
//   factor 2*sigmoid(v) when dst is enabled.
Tensor soft_weight(Tape& tape, const LayerRounding& lr, bool dst_enabled);

struct RoundingState {
  std::vector<LayerRounding> layers;

  int64_t total_count() const;
  int64_t hardened_count() const;
  double hardened_percent() const;
};

// Freezes the lowest-score soft variables, ranked across every layer in
// the state (ties broken by ascending flat index), until the total frozen
// count reaches ceil(target_percent/100 * total). A target below the
// current frozen fraction is an error. Returns how many were newly frozen.
int64_t harden(RoundingState& st, double target_percent);

// theta + scale * (indicator(nu > 0) - 0.5): full-precision weights that
// round-to-nearest back to exactly the frozen codes under the stored
// params. Requires every entry hardened.
Tensor merged_weights(const LayerRounding& lr);

// The frozen code grid: clamp(base + indicator(nu > 0), 0, qmax).
// Requires every entry hardened.
std::vector<uint8_t> hardened_codes(const LayerRounding& lr);

// Packs the frozen codes with the stored params; attaches the learned
// factor logits when with_dst is set.
QuantizedTensor to_quantized(const LayerRounding& lr, bool with_dst);

}  // namespace tsrq
