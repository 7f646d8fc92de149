#include "tsrq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tsrq/errors.hpp"
#include "tsrq/pack.hpp"

namespace tsrq {

int64_t QuantSpec::group_len(int64_t cols) const {
  validate(cols);
  if (granularity == Granularity::kPerGroup) return group_size;
  return cols;  // per-channel and per-token both span the whole row
}

void QuantSpec::validate(int64_t cols) const {
  if (bits < 2 || bits > 8) {
    throw ArgumentError("QuantSpec: bits must be in [2,8], got " +
                        std::to_string(bits));
  }
  if (!(gamma > 0.0f && gamma <= 1.0f) || !(beta > 0.0f && beta <= 1.0f)) {
    throw ArgumentError("QuantSpec: clipping multipliers must be in (0,1]");
  }
  if (granularity == Granularity::kPerGroup) {
    if (group_size < 1) {
      throw ArgumentError("QuantSpec: group_size must be >= 1");
    }
    if (cols % group_size != 0) {
      throw ArgumentError("QuantSpec: group_size " +
                          std::to_string(group_size) +
                          " does not divide row width " + std::to_string(cols));
    }
  }
  if (rounding != RoundingRule::kHalfAwayFromZero) {
    throw ArgumentError("QuantSpec: unknown rounding rule");
  }
}

std::vector<uint8_t> QuantizedTensor::unpack() const {
  return unpack_rows(packed, rows(), cols(), spec.bits);
}

namespace {

struct GroupExtrema {
  float mn;
  float mx;
};

GroupExtrema group_extrema(const float* w, int64_t len) {
  float mn = w[0], mx = w[0];
  for (int64_t i = 1; i < len; ++i) {
    mn = std::min(mn, w[i]);
    mx = std::max(mx, w[i]);
  }
  return {mn, mx};
}

void check_finite(const Tensor& w, const char* op) {
  for (float v : w.cspan()) {
    if (!std::isfinite(v)) {
      throw DataError(std::string(op) + ": non-finite weight value");
    }
  }
}

uint8_t rtn_code(float w, float s, int z, int64_t qmax) {
  const double q =
      std::round(static_cast<double>(w) / static_cast<double>(s)) + z;
  const double c = std::min(std::max(q, 0.0), static_cast<double>(qmax));
  return static_cast<uint8_t>(c);
}

}  // namespace

QuantParams compute_qparams(const Tensor& w, const QuantSpec& spec) {
  const int64_t rows = w.rows(), cols = w.cols();
  spec.validate(cols);
  check_finite(w, "compute_qparams");
  const int64_t glen = spec.group_len(cols);
  const int64_t gpr = cols / glen;
  const int64_t qmax = spec.qmax();

  QuantParams params;
  params.group_len = glen;
  params.groups_per_row = gpr;
  params.scales.resize(static_cast<size_t>(rows * gpr));
  params.zeros.resize(static_cast<size_t>(rows * gpr));

  const float* wd = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const auto [mn, mx] = group_extrema(wd + r * cols + g * glen, glen);
      const int64_t gi = r * gpr + g;
      const double range = static_cast<double>(spec.gamma) * mx -
                           static_cast<double>(spec.beta) * mn;
      if (mx == mn || range <= 0.0) {
        params.scales[static_cast<size_t>(gi)] = kDegenerateScale;
        params.zeros[static_cast<size_t>(gi)] = 0;
        continue;
      }
      const float s = static_cast<float>(range / static_cast<double>(qmax));
      double z = -std::round(static_cast<double>(spec.beta) * mn /
                             static_cast<double>(s));
      z = std::min(std::max(z, 0.0), static_cast<double>(qmax));
      params.scales[static_cast<size_t>(gi)] = s;
      params.zeros[static_cast<size_t>(gi)] = static_cast<uint8_t>(z);
    }
  }
  return params;
}

QuantizedTensor quantize_rtn(const Tensor& w, const QuantSpec& spec) {
  QuantParams params = compute_qparams(w, spec);
  const int64_t rows = w.rows(), cols = w.cols();
  const int64_t glen = params.group_len;
  const int64_t qmax = spec.qmax();
  std::vector<uint8_t> codes(static_cast<size_t>(rows * cols));
  const float* wd = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < params.groups_per_row; ++g) {
      const int64_t gi = r * params.groups_per_row + g;
      const float s = params.scales[static_cast<size_t>(gi)];
      const int z = params.zeros[static_cast<size_t>(gi)];
      uint8_t* crow = codes.data() + r * cols + g * glen;
      const float* wrow = wd + r * cols + g * glen;
      const auto [mn, mx] = group_extrema(wrow, glen);
      const double range = static_cast<double>(spec.gamma) * mx -
                           static_cast<double>(spec.beta) * mn;
      if (mx == mn || range <= 0.0) {
        // degenerate group: all codes zero by convention
        std::fill(crow, crow + glen, uint8_t{0});
        continue;
      }
      for (int64_t i = 0; i < glen; ++i) {
        crow[i] = rtn_code(wrow[i], s, z, qmax);
      }
    }
  }
  QuantizedTensor q;
  q.spec = spec;
  q.shape = {rows, cols};
  q.params = std::move(params);
  q.packed = pack_rows(codes, rows, cols, spec.bits);
  return q;
}

QuantizedTensor quantize_rtn(const Tensor& w, const QuantSpec& spec,
                             const QuantParams& params) {
  const int64_t rows = w.rows(), cols = w.cols();
  spec.validate(cols);
  check_finite(w, "quantize_rtn");
  if (params.group_len != spec.group_len(cols) ||
      params.group_count() != rows * params.groups_per_row ||
      params.groups_per_row != cols / params.group_len) {
    throw DimensionError("quantize_rtn: params do not match tensor layout");
  }
  const int64_t glen = params.group_len;
  const int64_t qmax = spec.qmax();
  std::vector<uint8_t> codes(static_cast<size_t>(rows * cols));
  const float* wd = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < params.groups_per_row; ++g) {
      const int64_t gi = r * params.groups_per_row + g;
      const float s = params.scales[static_cast<size_t>(gi)];
      const int z = params.zeros[static_cast<size_t>(gi)];
      uint8_t* crow = codes.data() + r * cols + g * glen;
      const float* wrow = wd + r * cols + g * glen;
      for (int64_t i = 0; i < glen; ++i) {
        crow[i] = rtn_code(wrow[i], s, z, qmax);
      }
    }
  }
  QuantizedTensor q;
  q.spec = spec;
  q.shape = {rows, cols};
  q.params = params;
  q.packed = pack_rows(codes, rows, cols, spec.bits);
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  const int64_t rows = q.rows(), cols = q.cols();
  const int64_t glen = q.params.group_len;
  const int64_t gpr = q.params.groups_per_row;
  if (q.dst_logits &&
      static_cast<int64_t>(q.dst_logits->size()) != q.params.group_count()) {
    throw DimensionError("dequantize: dst logit count does not match groups");
  }
  std::vector<uint8_t> codes = q.unpack();
  Tensor out = Tensor::zeros({rows, cols});
  float* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t gi = r * gpr + g;
      const float s = q.params.scales[static_cast<size_t>(gi)];
      const int z = q.params.zeros[static_cast<size_t>(gi)];
      float factor = 1.0f;
      if (q.dst_logits) {
        factor = 2.0f * stable_sigmoid((*q.dst_logits)[static_cast<size_t>(gi)]);
      }
      const uint8_t* crow = codes.data() + r * cols + g * glen;
      float* orow = ov + r * cols + g * glen;
      for (int64_t i = 0; i < glen; ++i) {
        orow[i] = factor * s * static_cast<float>(static_cast<int>(crow[i]) - z);
      }
    }
  }
  return out;
}

double quant_mse(const Tensor& w, const QuantSpec& spec) {
  Tensor back = dequantize(quantize_rtn(w, spec));
  const float* a = w.data();
  const float* b = back.data();
  double acc = 0.0;
  const int64_t n = w.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc;
}

std::pair<float, float> search_clipping(const Tensor& w, QuantSpec spec,
                                        int grid) {
  if (grid <= 0) return {1.0f, 1.0f};
  float best_gamma = 1.0f, best_beta = 1.0f;
  spec.gamma = 1.0f;
  spec.beta = 1.0f;
  double best = quant_mse(w, spec);
  for (int j = 0; j <= grid; ++j) {
    const float gamma = 1.0f - static_cast<float>(j) / (2.0f * grid);
    for (int l = 0; l <= grid; ++l) {
      if (j == 0 && l == 0) continue;  // (1,1) already evaluated
      const float beta = 1.0f - static_cast<float>(l) / (2.0f * grid);
      spec.gamma = gamma;
      spec.beta = beta;
      const double mse = quant_mse(w, spec);
      if (mse < best) {
        best = mse;
        best_gamma = gamma;
        best_beta = beta;
      }
    }
  }
  return {best_gamma, best_beta};
}

void fake_quant_rows_raw(const float* in, float* out, int64_t rows,
                         int64_t cols, int bits) {
  if (bits < 2 || bits > 8) {
    throw ArgumentError("fake_quant: bits must be in [2,8]");
  }
  const int64_t qmax = (int64_t{1} << bits) - 1;
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = in + r * cols;
    float* y = out + r * cols;
    const auto [mn, mx] = group_extrema(x, cols);
    if (mx == mn) {
      std::copy(x, x + cols, y);
      continue;
    }
    const float s = static_cast<float>(
        (static_cast<double>(mx) - mn) / static_cast<double>(qmax));
    double z = -std::round(static_cast<double>(mn) / static_cast<double>(s));
    z = std::min(std::max(z, 0.0), static_cast<double>(qmax));
    const int zi = static_cast<int>(z);
    for (int64_t i = 0; i < cols; ++i) {
      const uint8_t c = rtn_code(x[i], s, zi, qmax);
      y[i] = s * static_cast<float>(static_cast<int>(c) - zi);
    }
  }
}

Tensor fake_quant_activations(const Tensor& x, int bits) {
  Tensor out = Tensor::zeros(x.shape());
  fake_quant_rows_raw(x.data(), out.data(), x.rows(), x.cols(), bits);
  return out;
}

}  // namespace tsrq
