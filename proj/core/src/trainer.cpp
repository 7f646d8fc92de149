#include "tsrq/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "tsrq/adam.hpp"
#include "tsrq/errors.hpp"
#include "tsrq/rng.hpp"

namespace tsrq {

TrainResult train_toy(DecoderModel& model, const TokenDataset& data,
                      const TrainOptions& opts) {
  model.cfg.validate();
  if (data.num_segments() < 1) {
    throw DataError("train: dataset has no full segments");
  }
  if (data.seq_len > model.cfg.seq_len) {
    throw ArgumentError("train: dataset segments exceed the model seq_len");
  }
  if (opts.steps < 0 || opts.batch_size < 1) {
    throw ArgumentError("train: bad step or batch count");
  }

  std::vector<Tensor> params = model.parameters();
  for (auto& p : params) p.set_requires_grad(true);
  Adam opt(AdamConfig{opts.lr, 0.9f, 0.999f, 1e-8f});
  for (auto& p : params) opt.add_param(p);

  Rng rng(opts.seed);
  std::vector<int64_t> order(static_cast<size_t>(data.num_segments()));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t cursor = 0;
  auto next_segment = [&]() {
    if (cursor == order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<double> recent;
  for (int64_t step = 0; step < opts.steps; ++step) {
    Tape tape;
    Tensor loss;
    for (int64_t b = 0; b < opts.batch_size; ++b) {
      Tensor l = model_loss(tape, model, data.segment(next_segment()));
      loss = (b == 0) ? l : tape.add(loss, l);
    }
    loss = tape.mul_scalar(loss, 1.0f / static_cast<float>(opts.batch_size));
    const double lv = loss.item_hi();
    if (!std::isfinite(lv)) {
      throw OptimizationError("train: loss diverged at step " +
                              std::to_string(step));
    }
    tape.backward(loss);
    opt.step();
    opt.zero_grad();

    recent.push_back(lv);
    if (recent.size() > 50) recent.erase(recent.begin());
    if (opts.log_interval > 0 &&
        ((step + 1) % opts.log_interval == 0 || step + 1 == opts.steps)) {
      std::printf("train step %6lld  loss %.4f\n",
                  static_cast<long long>(step + 1), lv);
      std::fflush(stdout);
    }
  }

  for (auto& p : params) p.set_requires_grad(false);

  TrainResult res;
  res.steps = opts.steps;
  if (!recent.empty()) {
    double acc = 0.0;
    for (double v : recent) acc += v;
    res.final_loss = acc / static_cast<double>(recent.size());
  }
  return res;
}

}  // namespace tsrq
