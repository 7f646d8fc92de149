#include "tsrq/eval.hpp"

#include <algorithm>
#include <cmath>

#include "tsrq/errors.hpp"

namespace tsrq {

double perplexity(const DecoderModel& m, const TokenDataset& data,
                  int act_bits, int64_t max_segments) {
  m.cfg.validate();
  if (data.num_segments() < 1) {
    throw ArgumentError("perplexity: dataset has no full segments");
  }
  if (data.seq_len > m.cfg.seq_len) {
    throw ArgumentError("perplexity: segments exceed the model seq_len");
  }
  for (int32_t t : data.tokens) {
    if (t >= m.cfg.vocab_size) {
      throw ArgumentError("perplexity: token id outside the model vocab");
    }
  }
  int64_t n = data.num_segments();
  if (max_segments > 0) n = std::min(n, max_segments);

  double nll = 0.0;
  int64_t predicted = 0;
  for (int64_t i = 0; i < n; ++i) {
    Tape tape(/*recording=*/false);
    Tensor loss = model_loss(tape, m, data.segment(i), act_bits);
    nll += loss.item_hi() * static_cast<double>(data.seq_len - 1);
    predicted += data.seq_len - 1;
  }
  return std::exp(nll / static_cast<double>(predicted));
}

int64_t Footprint::total_f32() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.f32_bytes;
  return n;
}

int64_t Footprint::total_stored() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.stored_bytes;
  return n;
}

Footprint container_footprint(const Container& c) {
  Footprint fp;
  for (const auto& [name, entry] : c.entries) {
    FootprintEntry e;
    e.name = name;
    if (entry.is_quant()) {
      const QuantizedTensor& q = entry.quant();
      e.quantized = true;
      e.cols = q.cols();
      e.f32_bytes = q.numel() * 4;
      e.stored_bytes =
          static_cast<int64_t>(q.packed.size()) +
          static_cast<int64_t>(q.params.scales.size()) * 4 +
          static_cast<int64_t>(q.params.zeros.size()) +
          (q.dst_logits ? static_cast<int64_t>(q.dst_logits->size()) * 4 : 0);
    } else {
      const Tensor& t = entry.tensor();
      e.cols = t.shape().size() == 2 ? t.cols() : t.numel();
      e.f32_bytes = t.numel() * 4;
      e.stored_bytes = e.f32_bytes;
    }
    fp.entries.push_back(std::move(e));
  }
  return fp;
}

}  // namespace tsrq
