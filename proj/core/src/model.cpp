#include "tsrq/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

#include "tsrq/errors.hpp"
#include "tsrq/rng.hpp"

namespace tsrq {

using nlohmann::json;

const char* const kBlockLinearNames[kBlockLinearCount] = {
    "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

void DecoderConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_blocks < 1 ||
      mlp_hidden < 1) {
    throw ArgumentError("decoder config: all sizes must be >= 1");
  }
  if (seq_len < 2) {
    // matches the dataset rule: one window must hold a prediction pair
    throw ArgumentError("decoder config: seq_len must be >= 2");
  }
  if (d_model % n_heads != 0) {
    throw ArgumentError("decoder config: d_model must divide by n_heads");
  }
  if (rope_enabled && head_dim() % 2 != 0) {
    throw ArgumentError(
        "decoder config: rotary positions need an even head dim");
  }
}

std::string DecoderConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_blocks"] = n_blocks;
  j["mlp_hidden"] = mlp_hidden;
  j["seq_len"] = seq_len;
  j["rope_enabled"] = rope_enabled;
  return j.dump();
}

DecoderConfig DecoderConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("decoder config: bad json: ") + e.what());
  }
  DecoderConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.n_heads = j.at("n_heads").get<int64_t>();
    cfg.n_blocks = j.at("n_blocks").get<int64_t>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
    cfg.seq_len = j.at("seq_len").get<int64_t>();
    cfg.rope_enabled = j.at("rope_enabled").get<bool>();
  } catch (const json::exception& e) {
    throw DataError(std::string("decoder config: missing field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Tensor& BlockWeights::linear(int i) {
  switch (i) {
    case 0: return wq;
    case 1: return wk;
    case 2: return wv;
    case 3: return wo;
    case 4: return w_gate;
    case 5: return w_up;
    case 6: return w_down;
    default: throw ArgumentError("block weights: linear index out of range");
  }
}

const Tensor& BlockWeights::linear(int i) const {
  return const_cast<BlockWeights*>(this)->linear(i);
}

std::vector<Tensor> DecoderModel::parameters() const {
  std::vector<Tensor> ps = {tok_emb, pos_emb, ln_f, w_out};
  for (const auto& b : blocks) {
    ps.push_back(b.ln1_w);
    ps.push_back(b.ln2_w);
    for (int i = 0; i < kBlockLinearCount; ++i) ps.push_back(b.linear(i));
  }
  return ps;
}

namespace {

Tensor random_matrix(Rng& rng, int64_t rows, int64_t cols, float std_dev) {
  Tensor t = Tensor::zeros({rows, cols});
  for (float& v : t.span()) {
    v = static_cast<float>(rng.normal()) * std_dev;
  }
  return t;
}

}  // namespace

DecoderModel init_model(const DecoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  DecoderModel m;
  m.cfg = cfg;
  const float emb_std = 0.02f;
  // residual branches scaled down with depth so the initial output
  // distribution stays roughly unit-scale
  const float proj_std =
      0.02f / std::sqrt(2.0f * static_cast<float>(cfg.n_blocks));
  m.tok_emb = random_matrix(rng, cfg.vocab_size, cfg.d_model, emb_std);
  m.pos_emb = random_matrix(rng, cfg.seq_len, cfg.d_model, emb_std);
  m.ln_f = Tensor::full({cfg.d_model}, 1.0f);
  m.w_out = random_matrix(rng, cfg.vocab_size, cfg.d_model, emb_std);
  for (int64_t b = 0; b < cfg.n_blocks; ++b) {
    BlockWeights bw;
    bw.ln1_w = Tensor::full({cfg.d_model}, 1.0f);
    bw.ln2_w = Tensor::full({cfg.d_model}, 1.0f);
    bw.wq = random_matrix(rng, cfg.d_model, cfg.d_model, emb_std);
    bw.wk = random_matrix(rng, cfg.d_model, cfg.d_model, emb_std);
    bw.wv = random_matrix(rng, cfg.d_model, cfg.d_model, emb_std);
    bw.wo = random_matrix(rng, cfg.d_model, cfg.d_model, proj_std);
    bw.w_gate = random_matrix(rng, cfg.mlp_hidden, cfg.d_model, emb_std);
    bw.w_up = random_matrix(rng, cfg.mlp_hidden, cfg.d_model, emb_std);
    bw.w_down = random_matrix(rng, cfg.d_model, cfg.mlp_hidden, proj_std);
    m.blocks.push_back(std::move(bw));
  }
  return m;
}

Tensor embed_tokens(Tape& tape, const DecoderModel& m,
                    std::span<const int32_t> tokens) {
  const int64_t t = static_cast<int64_t>(tokens.size());
  if (t < 1) throw ArgumentError("embed: empty token window");
  if (t > m.cfg.seq_len) {
    throw ArgumentError("embed: window longer than the position table");
  }
  Tensor tok = tape.gather_rows(m.tok_emb, tokens);
  Tensor pos = tape.slice_rows(m.pos_emb, 0, t);
  return tape.add(tok, pos);
}

namespace {

// additive causal mask: zero on and below the diagonal, -inf above
Tensor causal_mask(int64_t t) {
  Tensor mask = Tensor::zeros({t, t});
  float* mv = mask.data();
  const float ninf = -std::numeric_limits<float>::infinity();
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = i + 1; j < t; ++j) mv[i * t + j] = ninf;
  }
  return mask;
}

struct RopeTables {
  Tensor cos_t;
  Tensor sin_t;
};

RopeTables rope_tables(const DecoderConfig& cfg, int64_t t) {
  const int64_t d = cfg.d_model, dh = cfg.head_dim();
  RopeTables rt{Tensor::zeros({t, d}), Tensor::zeros({t, d})};
  float* cv = rt.cos_t.data();
  float* sv = rt.sin_t.data();
  for (int64_t pos = 0; pos < t; ++pos) {
    for (int64_t i = 0; i < dh / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / dh);
      const double angle = static_cast<double>(pos) * freq;
      const float c = static_cast<float>(std::cos(angle));
      const float s = static_cast<float>(std::sin(angle));
      for (int64_t h = 0; h < cfg.n_heads; ++h) {
        const int64_t col = h * dh + 2 * i;
        cv[pos * d + col] = c;
        cv[pos * d + col + 1] = c;
        sv[pos * d + col] = s;
        sv[pos * d + col + 1] = s;
      }
    }
  }
  return rt;
}

Tensor apply_rope(Tape& tape, const Tensor& x, const RopeTables& rt) {
  return tape.add(tape.mul(x, rt.cos_t),
                  tape.mul(tape.rotate_pairs(x), rt.sin_t));
}

Tensor maybe_fake_quant(Tape& tape, const Tensor& x, int act_bits) {
  if (act_bits <= 0) return x;
  return tape.fake_quant_rows(x, act_bits);
}

}  // namespace

Tensor block_forward(Tape& tape, const DecoderConfig& cfg,
                     const BlockWeights& bw, const Tensor& x, int act_bits) {
  if (x.cols() != cfg.d_model) {
    throw DimensionError("block forward: input width != d_model");
  }
  const int64_t t = x.rows();
  const int64_t dh = cfg.head_dim();

  Tensor h = tape.rmsnorm(x, bw.ln1_w);
  Tensor hq = maybe_fake_quant(tape, h, act_bits);
  Tensor q = tape.matmul(hq, tape.transpose(bw.wq));
  Tensor k = tape.matmul(hq, tape.transpose(bw.wk));
  Tensor v = tape.matmul(hq, tape.transpose(bw.wv));
  if (cfg.rope_enabled) {
    const RopeTables rt = rope_tables(cfg, t);
    q = apply_rope(tape, q, rt);
    k = apply_rope(tape, k, rt);
  }

  const Tensor mask = causal_mask(t);
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(cfg.n_heads));
  for (int64_t hd = 0; hd < cfg.n_heads; ++hd) {
    Tensor qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
    Tensor kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
    Tensor vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
    Tensor scores =
        tape.mul_scalar(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    Tensor att = tape.softmax_rows(tape.add(scores, mask));
    head_outs.push_back(tape.matmul(att, vh));
  }
  Tensor cat = tape.concat_cols(head_outs);
  Tensor catq = maybe_fake_quant(tape, cat, act_bits);
  Tensor attn_out = tape.matmul(catq, tape.transpose(bw.wo));
  Tensor x1 = tape.add(x, attn_out);

  Tensor h2 = tape.rmsnorm(x1, bw.ln2_w);
  Tensor h2q = maybe_fake_quant(tape, h2, act_bits);
  Tensor gate = tape.matmul(h2q, tape.transpose(bw.w_gate));
  Tensor up = tape.matmul(h2q, tape.transpose(bw.w_up));
  Tensor act = tape.mul(tape.silu(gate), up);
  Tensor actq = maybe_fake_quant(tape, act, act_bits);
  Tensor down = tape.matmul(actq, tape.transpose(bw.w_down));
  return tape.add(x1, down);
}

Tensor model_forward_logits(Tape& tape, const DecoderModel& m,
                            std::span<const int32_t> tokens, int act_bits) {
  Tensor x = embed_tokens(tape, m, tokens);
  for (const auto& bw : m.blocks) {
    x = block_forward(tape, m.cfg, bw, x, act_bits);
  }
  Tensor xf = tape.rmsnorm(x, m.ln_f);
  return tape.matmul(xf, tape.transpose(m.w_out));
}

Tensor model_loss(Tape& tape, const DecoderModel& m,
                  std::span<const int32_t> tokens, int act_bits) {
  const int64_t t = static_cast<int64_t>(tokens.size());
  if (t < 2) throw ArgumentError("loss: need at least two tokens");
  Tensor logits = model_forward_logits(tape, m, tokens, act_bits);
  Tensor pred = tape.slice_rows(logits, 0, t - 1);
  return tape.cross_entropy_rows(pred, tokens.subspan(1));
}

Container container_from_model(const DecoderModel& m,
                               const std::string& meta_json) {
  json meta;
  if (!meta_json.empty()) {
    try {
      meta = json::parse(meta_json);
    } catch (const json::parse_error& e) {
      throw ArgumentError(std::string("model meta is not valid json: ") +
                          e.what());
    }
  }
  meta["kind"] = "decoder";
  meta["config"] = json::parse(m.cfg.to_json());

  Container c;
  c.meta_json = meta.dump();
  c.add("tok_emb", m.tok_emb.clone());
  c.add("pos_emb", m.pos_emb.clone());
  c.add("ln_f", m.ln_f.clone());
  c.add("w_out", m.w_out.clone());
  for (size_t b = 0; b < m.blocks.size(); ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    c.add(p + "ln1_w", m.blocks[b].ln1_w.clone());
    c.add(p + "ln2_w", m.blocks[b].ln2_w.clone());
    for (int i = 0; i < kBlockLinearCount; ++i) {
      c.add(p + kBlockLinearNames[i], m.blocks[b].linear(i).clone());
    }
  }
  return c;
}

namespace {

Tensor entry_as_tensor(const Container& c, const std::string& name) {
  const ContainerEntry& e = c.at(name);
  if (e.is_quant()) return dequantize(e.quant());
  return e.tensor().clone();
}

}  // namespace

DecoderModel model_from_container(const Container& c) {
  json meta;
  try {
    meta = json::parse(c.meta_json);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("container meta is not valid json: ") +
                    e.what());
  }
  if (!meta.contains("config")) {
    throw DataError("container meta has no model config");
  }
  DecoderModel m;
  m.cfg = DecoderConfig::from_json(meta["config"].dump());
  m.tok_emb = entry_as_tensor(c, "tok_emb");
  m.pos_emb = entry_as_tensor(c, "pos_emb");
  m.ln_f = entry_as_tensor(c, "ln_f");
  m.w_out = entry_as_tensor(c, "w_out");
  for (int64_t b = 0; b < m.cfg.n_blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    BlockWeights bw;
    bw.ln1_w = entry_as_tensor(c, p + "ln1_w");
    bw.ln2_w = entry_as_tensor(c, p + "ln2_w");
    for (int i = 0; i < kBlockLinearCount; ++i) {
      bw.linear(i) = entry_as_tensor(c, p + kBlockLinearNames[i]);
    }
    m.blocks.push_back(std::move(bw));
  }
  return m;
}

}  // namespace tsrq
