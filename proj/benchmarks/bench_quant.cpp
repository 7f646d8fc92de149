// Microbenchmarks for the kernels on the calibration hot path: raw matmul,
// block forward, one optimizer step on the soft-weight graph, nearest
// rounding, and code packing.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "tsrq/adam.hpp"
#include "tsrq/model.hpp"
#include "tsrq/pack.hpp"
#include "tsrq/quant.hpp"
#include "tsrq/rng.hpp"
#include "tsrq/rounding.hpp"
#include "tsrq/tensor.hpp"

using namespace tsrq;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from(shape, std::move(v));
}

void BM_MatmulNN(benchmark::State& state) {
  const int64_t n = state.range(0);
  Tensor a = random_tensor({n, n}, 1);
  Tensor b = random_tensor({n, n}, 2);
  Tensor c = Tensor::zeros({n, n});
  for (auto _ : state) {
    kernels::mm_nn(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_MatmulNN)->Arg(64)->Arg(128)->Arg(256);

void BM_BlockForward(benchmark::State& state) {
  DecoderConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.n_blocks = 1;
  cfg.mlp_hidden = 172;
  cfg.seq_len = 64;
  DecoderModel m = init_model(cfg, 3);
  Tensor x = random_tensor({cfg.seq_len, cfg.d_model}, 4);
  for (auto _ : state) {
    Tape tape(false);
    Tensor y = block_forward(tape, cfg, m.blocks[0], x);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_BlockForward);

// one gradient step of the rounding logits of a single projection against a
// fixed linear target, the inner loop of block calibration
void BM_SoftWeightStep(benchmark::State& state) {
  const int64_t out = 64, in = 256, batch = 64;
  Tensor w = random_tensor({out, in}, 5);
  QuantSpec spec;
  spec.bits = 2;
  spec.granularity = Granularity::kPerGroup;
  spec.group_size = 16;
  LayerRounding lr = init_layer_rounding("bench", w, spec);
  Tensor x = random_tensor({batch, in}, 6);
  Tensor target = random_tensor({batch, out}, 7);
  AdamConfig ac;
  Adam opt(ac);
  opt.add_param(lr.nu, 0.0f, true);
  opt.add_param(lr.dst, 1e-4f, false);
  for (auto _ : state) {
    Tape tape;
    Tensor soft = soft_weight(tape, lr, true);
    Tensor y = tape.matmul(x, tape.transpose(soft));
    Tensor loss = tape.sum_sq(tape.sub(y, target));
    tape.backward(loss);
    opt.step();
    opt.zero_grad();
  }
}
BENCHMARK(BM_SoftWeightStep);

void BM_QuantizeRtn(benchmark::State& state) {
  Tensor w = random_tensor({256, 1024}, 8);
  QuantSpec spec;
  spec.bits = 4;
  spec.granularity = Granularity::kPerGroup;
  spec.group_size = 128;
  for (auto _ : state) {
    QuantizedTensor q = quantize_rtn(w, spec);
    benchmark::DoNotOptimize(q.packed.data());
  }
  state.SetItemsProcessed(state.iterations() * w.numel());
}
BENCHMARK(BM_QuantizeRtn);

void BM_PackCodes(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  Rng rng(9);
  std::vector<uint8_t> codes(1 << 20);
  for (auto& c : codes) {
    c = static_cast<uint8_t>(rng.uniform_int(1 << bits));
  }
  for (auto _ : state) {
    std::vector<uint8_t> packed = pack_codes(codes, bits);
    benchmark::DoNotOptimize(packed.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(codes.size()));
}
BENCHMARK(BM_PackCodes)->Arg(2)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
