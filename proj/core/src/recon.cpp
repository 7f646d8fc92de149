#include "tsrq/recon.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "tsrq/adam.hpp"
#include "tsrq/errors.hpp"
#include "tsrq/rng.hpp"
#include "tsrq/schedule.hpp"

namespace tsrq {

Tensor reconstruction_loss(Tape& tape, std::span<const Tensor> outs,
                           std::span<const Tensor> targets) {
  if (outs.size() != targets.size() || outs.empty()) {
    throw DimensionError("reconstruction loss: sample counts differ or zero");
  }
  Tensor total;
  for (size_t i = 0; i < outs.size(); ++i) {
    Tensor sq = tape.sum_sq(tape.sub(outs[i], targets[i]));
    total = (i == 0) ? sq : tape.add(total, sq);
  }
  return tape.mul_scalar(total, 1.0f / static_cast<float>(outs.size()));
}

double reconstruction_loss_value(std::span<const Tensor> outs,
                                 std::span<const Tensor> targets) {
  if (outs.size() != targets.size() || outs.empty()) {
    throw DimensionError("reconstruction loss: sample counts differ or zero");
  }
  double total = 0.0;
  for (size_t i = 0; i < outs.size(); ++i) {
    if (outs[i].shape() != targets[i].shape()) {
      throw DimensionError("reconstruction loss: shape mismatch");
    }
    const float* a = outs[i].data();
    const float* b = targets[i].data();
    double acc = 0.0;
    for (int64_t j = 0; j < outs[i].numel(); ++j) {
      const double d = static_cast<double>(a[j]) - b[j];
      acc += d * d;
    }
    total += acc;
  }
  return total / static_cast<double>(outs.size());
}

BlockCapture capture_block_io(const DecoderModel& m, int64_t block_index,
                              const TokenDataset& calib, int64_t max_segments,
                              int act_bits) {
  if (block_index < 0 || block_index >= m.cfg.n_blocks) {
    throw ArgumentError("capture: block index out of range");
  }
  if (calib.num_segments() < 1) {
    throw ArgumentError("capture: calibration set has no full segments");
  }
  int64_t n = calib.num_segments();
  if (max_segments > 0) n = std::min(n, max_segments);

  BlockCapture cap;
  cap.inputs.reserve(static_cast<size_t>(n));
  cap.targets.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Tape tape(/*recording=*/false);
    Tensor x = embed_tokens(tape, m, calib.segment(i));
    for (int64_t b = 0; b < block_index; ++b) {
      x = block_forward(tape, m.cfg, m.blocks[static_cast<size_t>(b)], x,
                        act_bits);
    }
    Tensor y = block_forward(
        tape, m.cfg, m.blocks[static_cast<size_t>(block_index)], x, 0);
    cap.inputs.push_back(x);
    cap.targets.push_back(y);
  }
  return cap;
}

namespace {

// forward the block with the seven projections replaced
Tensor forward_with(Tape& tape, const DecoderConfig& cfg,
                    const BlockWeights& bw, std::span<const Tensor> weights,
                    const Tensor& x, int act_bits) {
  BlockWeights sub = bw;
  for (int i = 0; i < kBlockLinearCount; ++i) sub.linear(i) = weights[i];
  return block_forward(tape, cfg, sub, x, act_bits);
}

double capture_loss(const DecoderConfig& cfg, const BlockWeights& bw,
                    std::span<const Tensor> weights, const BlockCapture& cap,
                    int act_bits) {
  std::vector<Tensor> outs;
  outs.reserve(cap.inputs.size());
  for (const auto& x : cap.inputs) {
    Tape tape(/*recording=*/false);
    outs.push_back(forward_with(tape, cfg, bw, weights, x, act_bits));
  }
  return reconstruction_loss_value(outs, cap.targets);
}

}  // namespace

BlockResult optimize_block(const DecoderConfig& cfg, const BlockWeights& bw,
                           const BlockCapture& cap,
                           std::span<const QuantSpec> layer_specs,
                           const ParOptions& opts) {
  const auto t_start = std::chrono::steady_clock::now();
  if (layer_specs.size() != kBlockLinearCount) {
    throw ArgumentError("optimize block: need one spec per projection");
  }
  if (cap.inputs.empty() || cap.inputs.size() != cap.targets.size()) {
    throw ArgumentError("optimize block: empty or mismatched capture");
  }
  if (opts.steps_per_iter < 1 || opts.batch_size < 1) {
    throw ArgumentError("optimize block: bad step or batch count");
  }
  if (!opts.schedule.empty()) make_handcrafted_schedule(opts.schedule);

  RoundingState state;
  state.layers.reserve(kBlockLinearCount);
  for (int i = 0; i < kBlockLinearCount; ++i) {
    state.layers.push_back(init_layer_rounding(kBlockLinearNames[i],
                                               bw.linear(i), layer_specs[i]));
  }

  Adam opt(AdamConfig{opts.lr, 0.9f, 0.999f, 1e-8f});
  for (auto& lr : state.layers) {
    opt.add_param(lr.nu, 0.0f, /*skip_nonfinite=*/true);
  }
  if (opts.dst_enabled) {
    for (auto& lr : state.layers) {
      opt.add_param(lr.dst, opts.dst_weight_decay);
    }
  }

  ReconReport report;

  // nearest-rounding baseline on the full capture: the starting point
  // the optimizer has to beat
  {
    std::vector<Tensor> rtn;
    rtn.reserve(kBlockLinearCount);
    for (const auto& lr : state.layers) {
      rtn.push_back(
          dequantize(quantize_rtn(lr.theta, lr.spec, lr.params)));
    }
    report.initial_loss =
        capture_loss(cfg, bw, rtn, cap, opts.act_bits);
  }

  Rng rng(opts.seed);
  std::vector<int64_t> order(cap.inputs.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t cursor = 0;

  const int64_t iters = static_cast<int64_t>(opts.schedule.size());
  auto train_steps = [&](int64_t steps, int64_t iter_label) {
    for (int64_t t = 0; t < steps; ++t) {
      Tape tape;
      std::vector<Tensor> soft;
      soft.reserve(kBlockLinearCount);
      for (const auto& lr : state.layers) {
        soft.push_back(soft_weight(tape, lr, opts.dst_enabled));
      }
      std::vector<Tensor> outs, tgts;
      outs.reserve(static_cast<size_t>(opts.batch_size));
      tgts.reserve(static_cast<size_t>(opts.batch_size));
      for (int64_t b = 0; b < opts.batch_size; ++b) {
        const int64_t seg = order[cursor];
        cursor = (cursor + 1) % order.size();
        outs.push_back(forward_with(tape, cfg, bw, soft,
                                    cap.inputs[static_cast<size_t>(seg)],
                                    opts.act_bits));
        tgts.push_back(cap.targets[static_cast<size_t>(seg)]);
      }
      Tensor loss = reconstruction_loss(tape, outs, tgts);
      const double lv = loss.item_hi();
      if (!std::isfinite(lv)) {
        throw OptimizationError(
            "optimize block: non-finite loss at iteration " +
            std::to_string(iter_label + 1) + " step " + std::to_string(t + 1) +
            " (hardened " + std::to_string(state.hardened_count()) + "/" +
            std::to_string(state.total_count()) + ")");
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
      if (opts.log_interval > 0 && (t + 1) % opts.log_interval == 0) {
        report.loss_trace.push_back(lv);
      }
    }
  };
  for (int64_t k = 0; k < iters; ++k) {
    train_steps(opts.steps_per_iter, k);
    harden(state, opts.schedule[static_cast<size_t>(k)]);
  }
  harden(state, 100.0);
  // the factor logits were last tuned against partially soft codes; give
  // them one more pass against the final frozen grid (every rounding logit
  // is non-finite by now, so only the factors can move)
  if (opts.dst_enabled && iters > 0) {
    train_steps(opts.steps_per_iter, iters);
  }

  // keep-best guard: nothing above guarantees the trained grid actually
  // beats the baseline it started from, so never export a regression
  if (iters > 0) {
    std::vector<Tensor> trained_w;
    trained_w.reserve(kBlockLinearCount);
    for (auto& lr : state.layers) {
      trained_w.push_back(dequantize(to_quantized(lr, opts.dst_enabled)));
    }
    const double trained =
        capture_loss(cfg, bw, trained_w, cap, opts.act_bits);
    if (trained > report.initial_loss) {
      for (auto& lr : state.layers) {
        lr = init_layer_rounding(lr.name, lr.theta, lr.spec);
      }
      harden(state, 100.0);
    }
  }

  BlockResult res;
  for (auto& lr : state.layers) {
    res.quantized.push_back(to_quantized(lr, opts.dst_enabled));
    res.merged.push_back(merged_weights(lr));
  }

  {
    std::vector<Tensor> final_w;
    final_w.reserve(kBlockLinearCount);
    for (const auto& q : res.quantized) final_w.push_back(dequantize(q));
    report.final_loss = capture_loss(cfg, bw, final_w, cap, opts.act_bits);
  }

  for (int i = 0; i < kBlockLinearCount; ++i) {
    const auto& lr = state.layers[static_cast<size_t>(i)];
    QuantizedTensor rtn = quantize_rtn(lr.theta, lr.spec, lr.params);
    const auto [count, pct] = count_flips(res.quantized[static_cast<size_t>(i)], rtn);
    report.flips.push_back(LayerFlips{lr.name, count, lr.count(), pct});
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  res.report = std::move(report);
  return res;
}

QuantizeModelResult quantize_model(const DecoderModel& m,
                                   const TokenDataset& calib,
                                   const QuantizeModelOptions& opts,
                                   const std::string& meta_json) {
  m.cfg.validate();
  DecoderModel work = m;  // shares weight storage; handles are swapped below

  QuantizeModelResult result;
  std::vector<std::vector<QuantizedTensor>> per_block;

  for (int64_t b = 0; b < m.cfg.n_blocks; ++b) {
    BlockCapture cap = capture_block_io(work, b, calib, opts.calib_segments,
                                        opts.par.act_bits);
    const BlockWeights& bw = m.blocks[static_cast<size_t>(b)];

    std::vector<QuantSpec> specs(kBlockLinearCount, opts.spec);
    if (opts.search_clip_grid > 0) {
      for (int i = 0; i < kBlockLinearCount; ++i) {
        const auto [gamma, beta] =
            search_clipping(bw.linear(i), specs[static_cast<size_t>(i)],
                            opts.search_clip_grid);
        specs[static_cast<size_t>(i)].gamma = gamma;
        specs[static_cast<size_t>(i)].beta = beta;
      }
    }

    std::vector<QuantizedTensor> qs;
    ReconReport report;
    if (opts.rtn_only) {
      std::vector<Tensor> deq;
      for (int i = 0; i < kBlockLinearCount; ++i) {
        qs.push_back(quantize_rtn(bw.linear(i), specs[static_cast<size_t>(i)]));
        deq.push_back(dequantize(qs.back()));
      }
      report.block_index = b;
      report.initial_loss =
          capture_loss(m.cfg, bw, deq, cap, opts.par.act_bits);
      report.final_loss = report.initial_loss;
      for (int i = 0; i < kBlockLinearCount; ++i) {
        report.flips.push_back(LayerFlips{
            kBlockLinearNames[i], 0, qs[static_cast<size_t>(i)].numel(), 0.0});
      }
    } else {
      ParOptions par = opts.par;
      // decorrelate minibatch orders between blocks, reproducibly
      par.seed = opts.par.seed + 0x9E3779B97F4A7C15ull * static_cast<uint64_t>(b + 1);
      BlockResult br = optimize_block(m.cfg, bw, cap, specs, par);
      qs = std::move(br.quantized);
      report = std::move(br.report);
      report.block_index = b;
    }

    if (!opts.fp_propagation) {
      for (int i = 0; i < kBlockLinearCount; ++i) {
        work.blocks[static_cast<size_t>(b)].linear(i) =
            dequantize(qs[static_cast<size_t>(i)]);
      }
    }
    result.reports.push_back(std::move(report));
    per_block.push_back(std::move(qs));
  }

  // embeddings, norms, and the output head stay full precision
  nlohmann::json meta;
  if (!meta_json.empty()) {
    try {
      meta = nlohmann::json::parse(meta_json);
    } catch (const nlohmann::json::parse_error& e) {
      throw ArgumentError(std::string("quantize meta is not valid json: ") +
                          e.what());
    }
  }
  meta["kind"] = "decoder";
  meta["config"] = nlohmann::json::parse(m.cfg.to_json());

  Container c;
  c.meta_json = meta.dump();
  c.add("tok_emb", m.tok_emb.clone());
  c.add("pos_emb", m.pos_emb.clone());
  c.add("ln_f", m.ln_f.clone());
  c.add("w_out", m.w_out.clone());
  for (int64_t b = 0; b < m.cfg.n_blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    c.add(p + "ln1_w", m.blocks[static_cast<size_t>(b)].ln1_w.clone());
    c.add(p + "ln2_w", m.blocks[static_cast<size_t>(b)].ln2_w.clone());
    for (int i = 0; i < kBlockLinearCount; ++i) {
      c.add(p + kBlockLinearNames[i],
            std::move(per_block[static_cast<size_t>(b)][static_cast<size_t>(i)]));
    }
  }
  result.container = std::move(c);
  return result;
}

std::pair<int64_t, double> count_flips(const QuantizedTensor& a,
                                       const QuantizedTensor& b) {
  if (a.shape != b.shape || a.spec.bits != b.spec.bits ||
      a.params.group_len != b.params.group_len) {
    throw ArgumentError("count flips: layouts differ");
  }
  const std::vector<uint8_t> ca = a.unpack();
  const std::vector<uint8_t> cb = b.unpack();
  int64_t count = 0;
  for (size_t i = 0; i < ca.size(); ++i) {
    if (ca[i] != cb[i]) ++count;
  }
  const double pct =
      ca.empty() ? 0.0
                 : 100.0 * static_cast<double>(count) /
                       static_cast<double>(ca.size());
  return {count, pct};
}

}  // namespace tsrq
