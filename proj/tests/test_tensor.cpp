#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "tsrq/errors.hpp"
#include "tsrq/rng.hpp"
#include "tsrq/tensor.hpp"
#include "tsrq/threads.hpp"

using namespace tsrq;

namespace {

Tensor randn(Rng& rng, Shape shape, float scale = 1.0f, bool rg = true) {
  Tensor t = Tensor::zeros(shape, rg);
  for (auto& v : t.span()) v = static_cast<float>(rng.normal()) * scale;
  return t;
}

// Finite-difference oracle. `forward` must rebuild the whole graph from the
// current parameter values and return a scalar loss; the analytic gradient
// from one recorded backward is compared against central differences taken
// with non-recording forwards. Relative error uses a unit floor so tiny
// gradients degrade into an absolute check.
template <typename F>
void fd_check(F&& forward, std::vector<Tensor> params, double tol,
              float h = 1e-2f) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  Tensor loss = forward(tape);
  tape.backward(loss);

  std::vector<std::vector<float>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.grad(), p.grad() + p.numel());
  }

  Tape off(false);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    float* data = params[pi].data();
    for (int64_t i = 0; i < params[pi].numel(); ++i) {
      const float saved = data[i];
      data[i] = saved + h;
      const double lp = forward(off).item_hi();
      data[i] = saved - h;
      const double lm = forward(off).item_hi();
      data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::fabs(a - numeric) /
                         std::max({std::fabs(a), std::fabs(numeric), 1.0});
      CAPTURE(pi);
      CAPTURE(i);
      CAPTURE(a);
      CAPTURE(numeric);
      CHECK(rel < tol);
    }
  }
}

// weighted sum turns any tensor-valued op into a scalar loss with a
// well-scattered gradient
Tensor weighted(Tape& tape, const Tensor& y, const Tensor& r) {
  return tape.sum(tape.mul(y, r));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("matmul values match a hand computation") {
  Tape tape(false);
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = tape.matmul(a, b);
  CHECK(c.at(0) == 19.0f);
  CHECK(c.at(1) == 22.0f);
  CHECK(c.at(2) == 43.0f);
  CHECK(c.at(3) == 50.0f);
}

TEST_CASE("matmul gradients") {
  Rng rng(11);
  Tensor a = randn(rng, {2, 3});
  Tensor b = randn(rng, {3, 4});
  Tensor r = randn(rng, {2, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.matmul(a, b), r); }, {a, b},
           kTol);
}

TEST_CASE("matmul shape mismatch throws") {
  Tape tape(false);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(tape.matmul(a, b), DimensionError);
}

TEST_CASE("matmul is bit-deterministic across thread counts") {
  Rng rng(7);
  Tensor a = randn(rng, {33, 65}, 1.0f, false);
  Tensor b = randn(rng, {65, 29}, 1.0f, false);
  Tape tape(false);
  const int saved = max_threads();
  set_max_threads(1);
  Tensor c1 = tape.matmul(a, b);
  set_max_threads(4);
  Tensor c4 = tape.matmul(a, b);
  set_max_threads(saved);
  CHECK(std::memcmp(c1.data(), c4.data(), sizeof(float) * c1.numel()) == 0);
}

TEST_CASE("transpose values and gradients") {
  Tape off(false);
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = off.transpose(x);
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.at(1) == 4.0f);
  CHECK(y.at(4) == 3.0f);

  Rng rng(12);
  Tensor p = randn(rng, {3, 5});
  Tensor r = randn(rng, {5, 3}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.transpose(p), r); }, {p}, kTol);
}

TEST_CASE("reshape round trip and gradients") {
  Rng rng(13);
  Tensor p = randn(rng, {2, 6});
  Tensor r = randn(rng, {3, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.reshape(p, {3, 4}), r); }, {p},
           kTol);
  Tape off(false);
  CHECK_THROWS_AS(off.reshape(p, {5, 2}), DimensionError);
}

TEST_CASE("elementwise binary ops") {
  Rng rng(14);
  Tensor a = randn(rng, {3, 4});
  Tensor b = randn(rng, {3, 4});
  Tensor r = randn(rng, {3, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.add(a, b), r); }, {a, b}, kTol);
  fd_check([&](Tape& t) { return weighted(t, t.sub(a, b), r); }, {a, b}, kTol);
  fd_check([&](Tape& t) { return weighted(t, t.mul(a, b), r); }, {a, b}, kTol);

  Tape off(false);
  Tensor c = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(off.add(a, c), DimensionError);
}

TEST_CASE("scalar ops") {
  Rng rng(15);
  Tensor a = randn(rng, {2, 5});
  Tensor r = randn(rng, {2, 5}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.add_scalar(a, 1.25f), r); },
           {a}, kTol);
  fd_check([&](Tape& t) { return weighted(t, t.mul_scalar(a, -0.75f), r); },
           {a}, kTol);
}

TEST_CASE("sigmoid and silu gradients") {
  Rng rng(16);
  Tensor a = randn(rng, {3, 4});
  Tensor r = randn(rng, {3, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.sigmoid(a), r); }, {a}, kTol);
  fd_check([&](Tape& t) { return weighted(t, t.silu(a), r); }, {a}, kTol);
}

TEST_CASE("sigmoid saturates exactly at infinity with zero gradient") {
  const float inf = std::numeric_limits<float>::infinity();
  Tensor x = Tensor::from({1, 2}, {inf, -inf}, true);
  Tape tape;
  Tensor y = tape.sigmoid(x);
  CHECK(y.at(0) == 1.0f);
  CHECK(y.at(1) == 0.0f);
  tape.backward(tape.sum(y));
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 0.0f);
}

TEST_CASE("rotate_pairs values and gradients") {
  Tape off(false);
  Tensor x = Tensor::from({1, 4}, {1, 2, 3, 4});
  Tensor y = off.rotate_pairs(x);
  CHECK(y.at(0) == -2.0f);
  CHECK(y.at(1) == 1.0f);
  CHECK(y.at(2) == -4.0f);
  CHECK(y.at(3) == 3.0f);
  CHECK_THROWS_AS(off.rotate_pairs(Tensor::zeros({1, 3})), DimensionError);

  Rng rng(17);
  Tensor p = randn(rng, {2, 6});
  Tensor r = randn(rng, {2, 6}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.rotate_pairs(p), r); }, {p},
           kTol);
}

TEST_CASE("clamp gradients away from the kinks") {
  Rng rng(18);
  // keep every coordinate at least 0.05 from the clamp bounds so the
  // difference quotient never straddles a kink
  Tensor a = Tensor::zeros({4, 4}, true);
  for (auto& v : a.span()) {
    float x;
    do {
      x = static_cast<float>(rng.normal());
    } while (std::fabs(std::fabs(x) - 0.5f) < 0.05f);
    v = x;
  }
  Tensor r = randn(rng, {4, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.clamp(a, -0.5f, 0.5f), r); },
           {a}, kTol);
}

TEST_CASE("clamp boundary points carry subgradient one") {
  Tensor x = Tensor::from({1, 2}, {-0.5f, 0.5f}, true);
  Tape tape;
  Tensor y = tape.clamp(x, -0.5f, 0.5f);
  tape.backward(tape.sum(y));
  CHECK(x.grad()[0] == 1.0f);
  CHECK(x.grad()[1] == 1.0f);
}

TEST_CASE("softmax rows sum to one and differentiate") {
  Rng rng(19);
  Tensor a = randn(rng, {3, 5});
  Tape off(false);
  Tensor y = off.softmax_rows(a);
  for (int64_t i = 0; i < 3; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 5; ++j) s += y.at(i * 5 + j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  Tensor r = randn(rng, {3, 5}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.softmax_rows(a), r); }, {a},
           kTol);
}

TEST_CASE("softmax survives large row offsets") {
  Tensor x = Tensor::from({1, 3}, {1000.0f, 1001.0f, 1002.0f});
  Tape off(false);
  Tensor y = off.softmax_rows(x);
  CHECK(y.at(2) == doctest::Approx(0.66524096).epsilon(1e-5));
}

TEST_CASE("rmsnorm matches a hand computation") {
  Tensor x = Tensor::from({1, 2}, {3, 4});
  Tensor w = Tensor::from({2}, {1, 1});
  Tape off(false);
  Tensor y = off.rmsnorm(x, w);
  CHECK(y.at(0) == doctest::Approx(0.8485281034827337).epsilon(1e-6));
  CHECK(y.at(1) == doctest::Approx(1.1313708046436448).epsilon(1e-6));
}

TEST_CASE("rmsnorm gradients for input and gain") {
  Rng rng(20);
  Tensor x = randn(rng, {3, 4});
  Tensor w = randn(rng, {4}, 0.5f);
  for (auto& v : w.span()) v += 1.0f;
  Tensor r = randn(rng, {3, 4}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.rmsnorm(x, w), r); }, {x, w},
           kTol);
}

TEST_CASE("reductions") {
  Rng rng(21);
  Tensor a = randn(rng, {3, 4});
  fd_check([&](Tape& t) { return t.mean(a); }, {a}, kTol);
  fd_check([&](Tape& t) { return t.sum(a); }, {a}, kTol);
  fd_check([&](Tape& t) { return t.sum_sq(a); }, {a}, kTol);
}

TEST_CASE("reduction scalars keep a double accumulator") {
  Tensor x = Tensor::full({1, 1000}, 0.1f);
  Tape off(false);
  const double exact = 1000.0 * static_cast<double>(0.1f);
  CHECK(off.sum(x).item_hi() == doctest::Approx(exact).epsilon(1e-12));
}

TEST_CASE("slicing and concatenation") {
  Rng rng(22);
  Tensor a = randn(rng, {4, 6});
  Tensor r1 = randn(rng, {2, 6}, 1.0f, false);
  Tensor r2 = randn(rng, {4, 3}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.slice_rows(a, 1, 3), r1); },
           {a}, kTol);
  fd_check([&](Tape& t) { return weighted(t, t.slice_cols(a, 2, 5), r2); },
           {a},
           kTol);

  Tensor b = randn(rng, {3, 2});
  Tensor c = randn(rng, {3, 3});
  Tensor rc = randn(rng, {3, 5}, 1.0f, false);
  fd_check(
      [&](Tape& t) {
        Tensor parts[] = {b, c};
        return weighted(t, t.concat_cols(parts), rc);
      },
      {b, c}, kTol);

  Tape off(false);
  Tensor parts[] = {b, c};
  Tensor cat = off.concat_cols(parts);
  CHECK(cat.shape() == Shape{3, 5});
  CHECK(cat.at(2) == c.at(0));
  CHECK_THROWS_AS(off.slice_rows(a, 3, 2), DimensionError);
  CHECK_THROWS_AS(off.slice_cols(a, 0, 9), DimensionError);
}

TEST_CASE("repeat_cols layout and gradients") {
  Tape off(false);
  Tensor x = Tensor::from({1, 2}, {5, 9});
  Tensor y = off.repeat_cols(x, 3);
  CHECK(y.shape() == Shape{1, 6});
  CHECK(y.at(0) == 5.0f);
  CHECK(y.at(2) == 5.0f);
  CHECK(y.at(3) == 9.0f);

  Rng rng(23);
  Tensor p = randn(rng, {2, 3});
  Tensor r = randn(rng, {2, 6}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.repeat_cols(p, 2), r); }, {p},
           kTol);
}

TEST_CASE("gather_rows accumulates over repeated ids") {
  Rng rng(24);
  Tensor table = randn(rng, {5, 3});
  const int32_t ids[] = {0, 2, 2, 4};
  Tensor r = randn(rng, {4, 3}, 1.0f, false);
  fd_check([&](Tape& t) { return weighted(t, t.gather_rows(table, ids), r); },
           {table}, kTol);

  Tape off(false);
  Tensor g = off.gather_rows(table, ids);
  CHECK(g.at(3) == table.at(2 * 3));

  const int32_t bad[] = {5};
  CHECK_THROWS_AS(off.gather_rows(table, bad), ArgumentError);
}

TEST_CASE("cross entropy gradients and value") {
  Rng rng(25);
  Tensor logits = randn(rng, {4, 6});
  const int32_t targets[] = {1, 0, 5, 3};
  fd_check([&](Tape& t) { return t.cross_entropy_rows(logits, targets); },
           {logits}, kTol);

  // uniform logits: mean nll is log(vocab)
  Tensor flat = Tensor::zeros({2, 8}, true);
  const int32_t flat_targets[] = {3, 7};
  Tape tape;
  Tensor l = tape.cross_entropy_rows(flat, flat_targets);
  CHECK(l.item_hi() == doctest::Approx(std::log(8.0)).epsilon(1e-6));
}

TEST_CASE("fake quant gradient is straight-through") {
  Rng rng(26);
  Tensor x = randn(rng, {3, 8});
  Tensor r = randn(rng, {3, 8}, 1.0f, false);
  Tape tape;
  Tensor y = tape.fake_quant_rows(x, 4);
  tape.backward(tape.sum(tape.mul(y, r)));
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(x.grad()[i] == r.at(i));
  }
}

TEST_CASE("tape state errors") {
  Rng rng(27);
  Tensor a = randn(rng, {2, 2});
  Tape tape;
  Tensor y = tape.sum(tape.mul(a, a));
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), StateError);

  Tape tape2;
  Tensor m = tape2.mul(a, a);
  CHECK_THROWS_AS(tape2.backward(m), ArgumentError);  // not a scalar

  Tape off(false);
  Tensor z = off.sum(off.mul(a, a));
  CHECK(off.op_count() == 0);
  CHECK_THROWS_AS(off.backward(z), StateError);
}

TEST_CASE("non-recording forwards leave gradients untouched") {
  Rng rng(28);
  Tensor a = randn(rng, {2, 3});
  a.zero_grad();
  Tape off(false);
  off.sum(off.sigmoid(a));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == 0.0f);
}

TEST_CASE("gradients accumulate across reuse within one graph") {
  Tensor x = Tensor::from({1, 1}, {3.0f}, true);
  Tape tape;
  Tensor y = tape.mul(x, x);  // d/dx = 2x = 6
  tape.backward(tape.sum(y));
  CHECK(x.grad()[0] == doctest::Approx(6.0f));
}

TEST_CASE("hundred-seed sweep over the main primitives") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    Tensor a = randn(rng, {2, 3});
    Tensor b = randn(rng, {3, 3});
    Tensor r = randn(rng, {2, 3}, 1.0f, false);
    fd_check(
        [&](Tape& t) {
          Tensor h = t.matmul(a, b);
          return weighted(t, t.silu(h), r);
        },
        {a, b}, 1e-3);
  }
}
