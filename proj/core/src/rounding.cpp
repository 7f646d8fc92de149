#include "tsrq/rounding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tsrq/errors.hpp"
#include "tsrq/pack.hpp"

namespace tsrq {

int64_t LayerRounding::hardened() const {
  const float* nv = nu.data();
  int64_t count = 0;
  for (int64_t i = 0; i < nu.numel(); ++i) {
    if (std::isinf(nv[i])) ++count;
  }
  return count;
}

LayerRounding init_layer_rounding(std::string name, const Tensor& theta,
                                  const QuantSpec& spec) {
  LayerRounding lr;
  lr.name = std::move(name);
  lr.theta = theta.clone();
  lr.spec = spec;
  lr.params = compute_qparams(theta, spec);

  const int64_t rows = theta.rows(), cols = theta.cols();
  const int64_t glen = lr.params.group_len;
  const int64_t gpr = lr.params.groups_per_row;
  lr.nu = Tensor::zeros({rows, cols}, /*requires_grad=*/true);
  lr.dst = Tensor::zeros({rows, gpr}, /*requires_grad=*/true);
  lr.base = Tensor::zeros({rows, cols});
  lr.scale_full = Tensor::zeros({rows, cols});
  lr.zero_full = Tensor::zeros({rows, cols});

  const float* wd = theta.data();
  float* nv = lr.nu.data();
  float* bv = lr.base.data();
  float* sv = lr.scale_full.data();
  float* zv = lr.zero_full.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t gi = r * gpr + g;
      const float s = lr.params.scales[static_cast<size_t>(gi)];
      const int z = lr.params.zeros[static_cast<size_t>(gi)];
      for (int64_t c = g * glen; c < (g + 1) * glen; ++c) {
        const int64_t i = r * cols + c;
        const double d = static_cast<double>(wd[i]) / static_cast<double>(s);
        const double m = std::floor(d);
        double frac = d - m;
        frac = std::min(std::max(frac, 1e-4), 1.0 - 1e-4);
        nv[i] = static_cast<float>(std::log(frac / (1.0 - frac)));
        bv[i] = static_cast<float>(m + z);
        sv[i] = s;
        zv[i] = static_cast<float>(z);
      }
    }
  }
  return lr;
}

float hs_score(float nu_value) {
  return std::fabs(stable_sigmoid(nu_value) - 0.5f);
}

Tensor soft_weight(Tape& tape, const LayerRounding& lr, bool dst_enabled) {
  Tensor offs = tape.sigmoid(lr.nu);
  Tensor codes = tape.clamp(tape.add(offs, lr.base), 0.0f,
                            static_cast<float>(lr.spec.qmax()));
  Tensor w = tape.mul(tape.sub(codes, lr.zero_full), lr.scale_full);
  if (dst_enabled) {
    Tensor factor = tape.mul_scalar(tape.sigmoid(lr.dst), 2.0f);
    w = tape.mul(w, tape.repeat_cols(factor, lr.params.group_len));
  }
  return w;
}

int64_t RoundingState::total_count() const {
  int64_t n = 0;
  for (const auto& lr : layers) n += lr.count();
  return n;
}

int64_t RoundingState::hardened_count() const {
  int64_t n = 0;
  for (const auto& lr : layers) n += lr.hardened();
  return n;
}

double RoundingState::hardened_percent() const {
  const int64_t total = total_count();
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(hardened_count()) / total;
}

int64_t harden(RoundingState& st, double target_percent) {
  if (!(target_percent >= 0.0 && target_percent <= 100.0)) {
    throw ArgumentError("harden: target percent must lie in [0,100]");
  }
  const int64_t total = st.total_count();
  if (total == 0) return 0;
  const int64_t already = st.hardened_count();
  int64_t target = static_cast<int64_t>(
      std::ceil(target_percent / 100.0 * static_cast<double>(total)));
  target = std::min(target, total);
  if (target < already) {
    throw ArgumentError("harden: target percent is below the already-frozen fraction");
  }
  const int64_t want = target - already;
  if (want == 0) return 0;

  // score every soft variable; the flat index doubles as the tiebreak
  struct Entry {
    float score;
    int64_t flat;
  };
  std::vector<Entry> soft;
  soft.reserve(static_cast<size_t>(total - already));
  int64_t offset = 0;
  for (const auto& lr : st.layers) {
    const float* nv = lr.nu.data();
    for (int64_t i = 0; i < lr.count(); ++i) {
      if (!std::isinf(nv[i])) soft.push_back({hs_score(nv[i]), offset + i});
    }
    offset += lr.count();
  }
  const auto cut = soft.begin() + static_cast<int64_t>(want);
  std::nth_element(soft.begin(), cut - 1, soft.end(),
                   [](const Entry& a, const Entry& b) {
                     if (a.score != b.score) return a.score < b.score;
                     return a.flat < b.flat;
                   });
  std::sort(soft.begin(), cut, [](const Entry& a, const Entry& b) {
    return a.flat < b.flat;
  });

  const float inf = std::numeric_limits<float>::infinity();
  auto it = soft.begin();
  offset = 0;
  for (auto& lr : st.layers) {
    float* nv = lr.nu.data();
    const int64_t end = offset + lr.count();
    while (it != cut && it->flat < end) {
      const int64_t i = it->flat - offset;
      nv[i] = nv[i] > 0.0f ? inf : -inf;
      ++it;
    }
    offset = end;
  }
  return want;
}

namespace {

void require_fully_hardened(const LayerRounding& lr, const char* op) {
  if (lr.hardened() != lr.count()) {
    throw StateError(std::string(op) + ": layer '" + lr.name +
                     "' still has soft rounding variables");
  }
}

}  // namespace

Tensor merged_weights(const LayerRounding& lr) {
  require_fully_hardened(lr, "merged_weights");
  Tensor out = Tensor::zeros(lr.theta.shape());
  const float* wd = lr.theta.data();
  const float* nv = lr.nu.data();
  const float* sv = lr.scale_full.data();
  float* ov = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    const float alpha = nv[i] > 0.0f ? 1.0f : 0.0f;
    ov[i] = wd[i] + sv[i] * (alpha - 0.5f);
  }
  return out;
}

std::vector<uint8_t> hardened_codes(const LayerRounding& lr) {
  require_fully_hardened(lr, "hardened_codes");
  const float* nv = lr.nu.data();
  const float* bv = lr.base.data();
  const double qmax = static_cast<double>(lr.spec.qmax());
  std::vector<uint8_t> codes(static_cast<size_t>(lr.count()));
  for (int64_t i = 0; i < lr.count(); ++i) {
    const double c = static_cast<double>(bv[i]) + (nv[i] > 0.0f ? 1.0 : 0.0);
    codes[static_cast<size_t>(i)] =
        static_cast<uint8_t>(std::min(std::max(c, 0.0), qmax));
  }
  return codes;
}

QuantizedTensor to_quantized(const LayerRounding& lr, bool with_dst) {
  QuantizedTensor q;
  q.spec = lr.spec;
  q.shape = {lr.theta.rows(), lr.theta.cols()};
  q.params = lr.params;
  q.packed = pack_rows(hardened_codes(lr), lr.theta.rows(), lr.theta.cols(),
                       lr.spec.bits);
  if (with_dst) {
    q.dst_logits.emplace(lr.dst.cspan().begin(), lr.dst.cspan().end());
  }
  return q;
}

}  // namespace tsrq
