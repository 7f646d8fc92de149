#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "tsrq/tensor.hpp"

namespace tsrq {

enum class Granularity : uint8_t {
  kPerChannel = 0,  // one group per output row
  kPerGroup = 1,    // fixed-size groups along the input axis
  kPerToken = 2,    // one group per row of an activation matrix
};

enum class RoundingRule : uint8_t {
  kHalfAwayFromZero = 0,
};

// Affine quantizer description. For a group with extrema (mn, mx):
//   s = (gamma*mx - beta*mn) / (2^bits - 1)
//   z = clamp(-round(beta*mn / s), 0, 2^bits - 1)
//   code(w) = clamp(round(w/s) + z, 0, 2^bits - 1)
// Rounding is half-away-from-zero throughout. A degenerate group (mx == mn,
// or a clipped range that collapses to zero width) gets s = 1e-8, z = 0 and
// all codes 0.
struct QuantSpec {
  int bits = 4;
  Granularity granularity = Granularity::kPerChannel;
  int64_t group_size = 0;  // only meaningful for kPerGroup
  float gamma = 1.0f;      // max-side clipping multiplier, in (0, 1]
  float beta = 1.0f;       // min-side clipping multiplier, in (0, 1]
  RoundingRule rounding = RoundingRule::kHalfAwayFromZero;

  int64_t qmax() const { return (int64_t{1} << bits) - 1; }
  // group length for rows of the given width; throws on invalid spec
  int64_t group_len(int64_t cols) const;
  void validate(int64_t cols) const;
};

// Per-group scale and zero point, groups laid out row-major:
// group index = row * groups_per_row + g.
struct QuantParams {
  std::vector<float> scales;
  std::vector<uint8_t> zeros;
  int64_t groups_per_row = 1;
  int64_t group_len = 0;

  int64_t group_count() const {
    return static_cast<int64_t>(scales.size());
  }
};

constexpr float kDegenerateScale = 1e-8f;

// Quantized 2-d weight. Codes are bit-packed row-major with each row padded
// to a byte boundary. `dst_logits` holds the per-group dequantization scale
// logits v; when present, dequantization multiplies by 2*sigmoid(v).
struct QuantizedTensor {
  QuantSpec spec;
  Shape shape;  // [rows, cols]
  QuantParams params;
  std::vector<uint8_t> packed;
  std::optional<std::vector<float>> dst_logits;

  int64_t rows() const { return shape[0]; }
  int64_t cols() const { return shape[1]; }
  int64_t numel() const { return shape[0] * shape[1]; }
  std::vector<uint8_t> unpack() const;  // one code byte per element
};

QuantParams compute_qparams(const Tensor& w, const QuantSpec& spec);

// Round-to-nearest quantization. The two-argument form computes qparams from
// w; the three-argument form quantizes against externally supplied params
// (used to re-quantize merged weights against the stored scales).
QuantizedTensor quantize_rtn(const Tensor& w, const QuantSpec& spec);
QuantizedTensor quantize_rtn(const Tensor& w, const QuantSpec& spec,
                             const QuantParams& params);

// s * (code - z), times 2*sigmoid(v) when dst_logits are present
Tensor dequantize(const QuantizedTensor& q);

// Grid search over clipping multipliers gamma, beta in
// {1 - j/(2*grid) : j = 0..grid}, minimizing total squared reconstruction
// error under per-group RTN. Never returns a pair worse than (1,1); ties
// keep the earlier (larger) candidates. grid <= 0 skips the search.
std::pair<float, float> search_clipping(const Tensor& w, QuantSpec spec,
                                        int grid);

// total squared error of quantize->dequantize under the given spec
double quant_mse(const Tensor& w, const QuantSpec& spec);

// Per-row (per-token) dynamic fake quantization with gamma = beta = 1.
// Degenerate rows pass through unchanged. Pure value transform; the
// differentiable straight-through version lives on Tape::fake_quant_rows.
Tensor fake_quant_activations(const Tensor& x, int bits);
void fake_quant_rows_raw(const float* in, float* out, int64_t rows,
                         int64_t cols, int bits);

}  // namespace tsrq
