#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "tsrq/errors.hpp"
#include "tsrq/quant.hpp"
#include "tsrq/rng.hpp"
#include "tsrq/tensor.hpp"

using namespace tsrq;

namespace {

Tensor randn(Rng& rng, Shape shape, float scale = 1.0f) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.span()) v = static_cast<float>(rng.normal()) * scale;
  return t;
}

double round_away(double x) { return std::round(x); }

// independent double-precision recomputation of the whole quantizer,
// written directly from the group rules rather than sharing any code with
// the implementation under test
struct OracleGroup {
  double scale;
  int zero;
  std::vector<int> codes;
};

OracleGroup oracle_quantize(const std::vector<double>& w, int bits,
                            double gamma, double beta) {
  const double qmax = std::pow(2.0, bits) - 1.0;
  double mn = w[0], mx = w[0];
  for (double v : w) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  OracleGroup g;
  const double range = gamma * mx - beta * mn;
  if (mx == mn || range <= 0.0) {
    g.scale = 1e-8;
    g.zero = 0;
    g.codes.assign(w.size(), 0);
    return g;
  }
  // the scale is stored in f32, and both the zero point and the codes are
  // rounded against that stored value
  g.scale = static_cast<double>(static_cast<float>(range / qmax));
  g.zero = static_cast<int>(std::min(
      qmax, std::max(0.0, -round_away(beta * mn / g.scale))));
  for (double v : w) {
    const double c = round_away(v / g.scale) + g.zero;
    g.codes.push_back(static_cast<int>(std::min(qmax, std::max(0.0, c))));
  }
  return g;
}

QuantSpec group_spec(int bits, int64_t gs) {
  QuantSpec s;
  s.bits = bits;
  s.granularity = Granularity::kPerGroup;
  s.group_size = gs;
  return s;
}

}  // namespace

TEST_CASE("worked example: non-negative row, per-channel 2-bit") {
  Tensor w = Tensor::from({1, 4}, {0, 1, 2, 3});
  QuantSpec spec;
  spec.bits = 2;
  QuantizedTensor q = quantize_rtn(w, spec);
  CHECK(q.params.scales[0] == doctest::Approx(1.0f));
  CHECK(q.params.zeros[0] == 0);
  const auto codes = q.unpack();
  for (int i = 0; i < 4; ++i) CHECK(codes[i] == i);
  Tensor back = dequantize(q);
  for (int i = 0; i < 4; ++i) CHECK(back.at(i) == doctest::Approx(w.at(i)));
}

TEST_CASE("worked example: signed row picks an interior zero point") {
  Tensor w = Tensor::from({1, 4}, {-2, -1, 0, 1});
  QuantSpec spec;
  spec.bits = 2;
  QuantizedTensor q = quantize_rtn(w, spec);
  CHECK(q.params.scales[0] == doctest::Approx(1.0f));
  CHECK(q.params.zeros[0] == 2);
  const auto codes = q.unpack();
  CHECK(codes[0] == 0);
  CHECK(codes[1] == 1);
  CHECK(codes[2] == 2);
  CHECK(codes[3] == 3);
}

TEST_CASE("group length and validation") {
  QuantSpec pc;
  CHECK(pc.group_len(48) == 48);
  QuantSpec pg = group_spec(4, 16);
  CHECK(pg.group_len(48) == 16);
  CHECK_THROWS_AS(group_spec(4, 13).group_len(48), ArgumentError);
  QuantSpec bad = pg;
  bad.bits = 1;
  CHECK_THROWS_AS(bad.validate(48), ArgumentError);
  bad.bits = 9;
  CHECK_THROWS_AS(bad.validate(48), ArgumentError);
  QuantSpec badclip = pg;
  badclip.gamma = 0.0f;
  CHECK_THROWS_AS(badclip.validate(48), ArgumentError);
  badclip.gamma = 1.5f;
  CHECK_THROWS_AS(badclip.validate(48), ArgumentError);
}

TEST_CASE("codes match an independent double recomputation") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(500 + seed);
    const int bits = 2 + static_cast<int>(rng.uniform_int(7));
    Tensor w = randn(rng, {4, 32});
    QuantSpec spec = group_spec(bits, 8);
    QuantizedTensor q = quantize_rtn(w, spec);
    const auto codes = q.unpack();
    for (int64_t r = 0; r < 4; ++r) {
      for (int64_t g = 0; g < 4; ++g) {
        std::vector<double> vals;
        for (int64_t j = 0; j < 8; ++j) {
          vals.push_back(w.at(r * 32 + g * 8 + j));
        }
        OracleGroup og = oracle_quantize(vals, bits, 1.0, 1.0);
        const int64_t gi = r * q.params.groups_per_row + g;
        CHECK(q.params.scales[gi] ==
              doctest::Approx(og.scale).epsilon(1e-6));
        CHECK(static_cast<int>(q.params.zeros[gi]) == og.zero);
        for (int64_t j = 0; j < 8; ++j) {
          CAPTURE(seed);
          CAPTURE(r);
          CAPTURE(g);
          CAPTURE(j);
          CHECK(static_cast<int>(codes[r * 32 + g * 8 + j]) == og.codes[j]);
        }
      }
    }
  }
}

TEST_CASE("round trip error is bounded by half a step") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(900 + seed);
    Tensor w = randn(rng, {6, 24}, 2.0f);
    QuantSpec spec = group_spec(4, 12);
    QuantizedTensor q = quantize_rtn(w, spec);
    Tensor back = dequantize(q);
    for (int64_t r = 0; r < 6; ++r) {
      for (int64_t j = 0; j < 24; ++j) {
        const int64_t gi = r * q.params.groups_per_row + j / 12;
        const float s = q.params.scales[gi];
        const float err = std::fabs(back.at(r * 24 + j) - w.at(r * 24 + j));
        CHECK(err <= 0.5f * s + 4.0f * s * 1.2e-7f);
      }
    }
  }
}

TEST_CASE("zero points stay inside the code range") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1300 + seed);
    Tensor w = randn(rng, {3, 16}, 5.0f);
    for (auto& v : w.span()) v += 4.0f;  // frequently all-positive groups
    QuantSpec spec = group_spec(3, 4);
    QuantizedTensor q = quantize_rtn(w, spec);
    for (uint8_t z : q.params.zeros) CHECK(z <= spec.qmax());
    for (float s : q.params.scales) CHECK(s > 0.0f);
  }
}

TEST_CASE("degenerate groups quantize to all-zero codes") {
  Tensor w = Tensor::from({1, 8}, {3, 3, 3, 3, -1, 2, -1, 2});
  QuantSpec spec = group_spec(4, 4);
  QuantizedTensor q = quantize_rtn(w, spec);
  CHECK(q.params.scales[0] == kDegenerateScale);
  CHECK(q.params.zeros[0] == 0);
  const auto codes = q.unpack();
  for (int i = 0; i < 4; ++i) CHECK(codes[i] == 0);
  // healthy second group unaffected
  CHECK(q.params.scales[1] > kDegenerateScale);
  Tensor back = dequantize(q);
  for (int i = 0; i < 4; ++i) CHECK(back.at(i) == 0.0f);
}

TEST_CASE("all-zero weights survive the round trip") {
  Tensor w = Tensor::zeros({2, 4});
  QuantizedTensor q = quantize_rtn(w, QuantSpec{});
  Tensor back = dequantize(q);
  for (int64_t i = 0; i < 8; ++i) CHECK(back.at(i) == 0.0f);
}

TEST_CASE("nan input is rejected") {
  Tensor w = Tensor::from({1, 4}, {1, 2, std::nanf(""), 4});
  CHECK_THROWS_AS(quantize_rtn(w, QuantSpec{}), DataError);
}

TEST_CASE("group permutation permutes codes without coupling") {
  Rng rng(77);
  Tensor w = randn(rng, {1, 16});
  QuantSpec spec = group_spec(4, 4);
  QuantizedTensor q = quantize_rtn(w, spec);

  // swap groups 1 and 2 wholesale
  Tensor wp = w.clone();
  for (int j = 0; j < 4; ++j) {
    wp.data()[4 + j] = w.at(8 + j);
    wp.data()[8 + j] = w.at(4 + j);
  }
  QuantizedTensor qp = quantize_rtn(wp, spec);
  const auto a = q.unpack();
  const auto b = qp.unpack();
  for (int j = 0; j < 4; ++j) {
    CHECK(a[4 + j] == b[8 + j]);
    CHECK(a[8 + j] == b[4 + j]);
    CHECK(a[j] == b[j]);
    CHECK(a[12 + j] == b[12 + j]);
  }
  CHECK(q.params.scales[1] == qp.params.scales[2]);
  CHECK(q.params.zeros[2] == qp.params.zeros[1]);
}

TEST_CASE("external params reproduce the same codes") {
  Rng rng(78);
  Tensor w = randn(rng, {4, 16});
  QuantSpec spec = group_spec(3, 8);
  QuantParams params = compute_qparams(w, spec);
  QuantizedTensor a = quantize_rtn(w, spec);
  QuantizedTensor b = quantize_rtn(w, spec, params);
  CHECK(a.unpack() == b.unpack());

  QuantParams truncated = params;
  truncated.scales.pop_back();
  CHECK_THROWS_AS(quantize_rtn(w, spec, truncated), DimensionError);
}

TEST_CASE("clipping search never loses to the unclipped pair") {
  for (uint64_t seed = 0; seed < 15; ++seed) {
    Rng rng(2100 + seed);
    Tensor w = randn(rng, {2, 16});
    QuantSpec spec = group_spec(2, 8);
    auto [gamma, beta] = search_clipping(w, spec, 8);
    QuantSpec clipped = spec;
    clipped.gamma = gamma;
    clipped.beta = beta;
    CHECK(quant_mse(w, clipped) <= quant_mse(w, spec) + 1e-12);
  }
}

TEST_CASE("clipping search shrinks the range around an outlier") {
  Rng rng(79);
  Tensor w = Tensor::zeros({1, 32});
  for (auto& v : w.span()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  w.data()[7] = 40.0f;  // single extreme outlier dominates the step size
  QuantSpec spec = group_spec(2, 32);
  auto [gamma, beta] = search_clipping(w, spec, 16);
  CHECK(gamma < 1.0f);
  QuantSpec clipped = spec;
  clipped.gamma = gamma;
  clipped.beta = beta;
  CHECK(quant_mse(w, clipped) < quant_mse(w, spec));
}

TEST_CASE("clipping search with no grid returns the identity pair") {
  Rng rng(80);
  Tensor w = randn(rng, {1, 8});
  auto [gamma, beta] = search_clipping(w, group_spec(4, 8), 0);
  CHECK(gamma == 1.0f);
  CHECK(beta == 1.0f);
}

TEST_CASE("activation fake quant matches the worked example") {
  Tensor x = Tensor::from({1, 4}, {0.0f, 0.3f, 0.7f, 3.0f});
  Tensor y = fake_quant_activations(x, 2);
  CHECK(y.at(0) == doctest::Approx(0.0f));
  CHECK(y.at(1) == doctest::Approx(0.0f));
  CHECK(y.at(2) == doctest::Approx(1.0f));
  CHECK(y.at(3) == doctest::Approx(3.0f));
}

TEST_CASE("activation fake quant leaves constant rows alone") {
  Tensor x = Tensor::from({2, 3}, {5, 5, 5, 0, 1, 2});
  Tensor y = fake_quant_activations(x, 8);
  CHECK(y.at(0) == 5.0f);
  CHECK(y.at(1) == 5.0f);
  CHECK(y.at(2) == 5.0f);
  CHECK_THROWS_AS(fake_quant_activations(x, 1), ArgumentError);
  CHECK_THROWS_AS(fake_quant_activations(x, 9), ArgumentError);
}

TEST_CASE("dst logits rescale dequantization by a doubled sigmoid") {
  Rng rng(81);
  Tensor w = randn(rng, {2, 8});
  QuantSpec spec = group_spec(4, 4);
  QuantizedTensor q = quantize_rtn(w, spec);

  QuantizedTensor with_v = q;
  with_v.dst_logits = std::vector<float>(
      static_cast<size_t>(q.params.group_count()), 0.0f);
  Tensor plain = dequantize(q);
  Tensor scaled = dequantize(with_v);
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK(scaled.at(i) == plain.at(i));  // sigmoid(0) doubles to exactly 1
  }

  with_v.dst_logits = std::vector<float>(
      static_cast<size_t>(q.params.group_count()), 50.0f);
  Tensor doubled = dequantize(with_v);
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK(doubled.at(i) == doctest::Approx(2.0f * plain.at(i)));
  }

  with_v.dst_logits = std::vector<float>(3, 0.0f);
  CHECK_THROWS_AS(dequantize(with_v), DimensionError);
}
