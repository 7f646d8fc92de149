#pragma once

// Small decoder-only transformer: token + learned position embeddings,
// pre-norm causal self-attention, SwiGLU MLP, RMSNorm everywhere, weight
// matrices stored [out_features, in_features]. One sequence per forward.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsrq/container.hpp"
#include "tsrq/tensor.hpp"

namespace tsrq {

struct DecoderConfig {
  int64_t vocab_size = 256;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_blocks = 2;
  int64_t mlp_hidden = 172;
  int64_t seq_len = 256;
  bool rope_enabled = false;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  std::string to_json() const;
  static DecoderConfig from_json(const std::string& text);
};

// the seven per-block projections eligible for weight quantization,
// in fixed order: q, k, v, o, gate, up, down
inline constexpr int kBlockLinearCount = 7;
extern const char* const kBlockLinearNames[kBlockLinearCount];

struct BlockWeights {
  Tensor ln1_w, ln2_w;   // rmsnorm gains [d]
  Tensor wq, wk, wv, wo; // [d, d]
  Tensor w_gate, w_up;   // [mlp_hidden, d]
  Tensor w_down;         // [d, mlp_hidden]

  Tensor& linear(int i);
  const Tensor& linear(int i) const;
};

struct DecoderModel {
  DecoderConfig cfg;
  Tensor tok_emb;  // [vocab, d]
  Tensor pos_emb;  // [seq_len, d]
  Tensor ln_f;     // [d]
  Tensor w_out;    // [vocab, d]
  std::vector<BlockWeights> blocks;

  // handles to every trainable tensor (aliases, not copies)
  std::vector<Tensor> parameters() const;
};

DecoderModel init_model(const DecoderConfig& cfg, uint64_t seed);

// token + position embeddings for one window; the input to block 0
Tensor embed_tokens(Tape& tape, const DecoderModel& m,
                    std::span<const int32_t> tokens);

// x [T,d] -> [T,d]; act_bits > 0 fake-quantizes the input rows of every
// projection (per-token dynamic, straight-through gradient)
Tensor block_forward(Tape& tape, const DecoderConfig& cfg,
                     const BlockWeights& bw, const Tensor& x,
                     int act_bits = 0);

// full forward to next-token logits [T, vocab]
Tensor model_forward_logits(Tape& tape, const DecoderModel& m,
                            std::span<const int32_t> tokens,
                            int act_bits = 0);

// mean cross entropy of predicting tokens[1..] from tokens[..T-1]
Tensor model_loss(Tape& tape, const DecoderModel& m,
                  std::span<const int32_t> tokens, int act_bits = 0);

// container round trip; quantized entries are dequantized on load
Container container_from_model(const DecoderModel& m,
                               const std::string& meta_json = "");
DecoderModel model_from_container(const Container& c);

}  // namespace tsrq
