// Command-line front end: toy training, calibration-based quantization,
// perplexity evaluation, flip inspection, and schedule sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsrq/data.hpp"
#include "tsrq/errors.hpp"
#include "tsrq/eval.hpp"
#include "tsrq/model.hpp"
#include "tsrq/recon.hpp"
#include "tsrq/schedule.hpp"
#include "tsrq/trainer.hpp"

namespace {

using nlohmann::json;
using namespace tsrq;

constexpr int kExitValidation = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitIo = 3;

struct DataArgs {
  std::string path;
  std::string format = "text";  // text | u16
  int64_t seq_len = 256;
  int64_t vocab = 256;

  TokenDataset load() const {
    const CorpusFormat fmt =
        format == "u16" ? CorpusFormat::kTokensU16 : CorpusFormat::kText;
    return ingest_text(path, seq_len, vocab, fmt);
  }
};

void add_data_options(CLI::App* cmd, DataArgs& d, bool with_vocab) {
  cmd->add_option("--data", d.path, "corpus file")->required();
  cmd->add_option("--format", d.format, "corpus format: text | u16")
      ->check(CLI::IsMember({"text", "u16"}));
  if (with_vocab) {
    cmd->add_option("--data-vocab", d.vocab, "vocab bound for token files");
  }
}

// Everything a quantization run depends on; serialized into reports so a
// run can be reproduced from its own output.
struct QuantRunConfig {
  std::string model_path;
  std::string data_path;
  std::string data_format = "text";
  std::string out_path;
  std::string report_path;
  std::string trace_dir;
  std::string method = "par";  // par | rtn
  int bits = 4;
  int64_t group_size = 0;  // 0 = per-channel
  double gamma = 1.0;
  double beta = 1.0;
  int search_clip = 0;
  std::string schedule = "exp:t=4,K=20";
  int64_t steps = 250;
  int64_t batch = 4;
  double lr = 1e-3;
  uint64_t seed = 0;
  bool dst = true;
  double dst_weight_decay = 1e-4;
  int act_bits = 0;  // 0 = no activation quantization
  bool fp_propagation = false;
  int64_t calib_segments = 16;
  int64_t log_interval = 25;

  json to_json() const {
    json j;
    j["model"] = model_path;
    j["data"] = data_path;
    j["data_format"] = data_format;
    j["out"] = out_path;
    j["report"] = report_path;
    j["trace_dir"] = trace_dir;
    j["method"] = method;
    j["bits"] = bits;
    j["group_size"] = group_size;
    j["gamma"] = gamma;
    j["beta"] = beta;
    j["search_clip"] = search_clip;
    j["schedule"] = schedule;
    j["steps"] = steps;
    j["batch"] = batch;
    j["lr"] = lr;
    j["seed"] = seed;
    j["dst"] = dst;
    j["dst_weight_decay"] = dst_weight_decay;
    j["act_bits"] = act_bits;
    j["fp_propagation"] = fp_propagation;
    j["calib_segments"] = calib_segments;
    j["log_interval"] = log_interval;
    return j;
  }

  static QuantRunConfig from_json(const json& j) {
    QuantRunConfig c;
    c.model_path = j.at("model").get<std::string>();
    c.data_path = j.at("data").get<std::string>();
    c.data_format = j.value("data_format", std::string("text"));
    c.out_path = j.at("out").get<std::string>();
    c.report_path = j.value("report", std::string());
    c.trace_dir = j.value("trace_dir", std::string());
    c.method = j.value("method", std::string("par"));
    c.bits = j.value("bits", 4);
    c.group_size = j.value("group_size", int64_t{0});
    c.gamma = j.value("gamma", 1.0);
    c.beta = j.value("beta", 1.0);
    c.search_clip = j.value("search_clip", 0);
    c.schedule = j.value("schedule", std::string("exp:t=4,K=20"));
    c.steps = j.value("steps", int64_t{250});
    c.batch = j.value("batch", int64_t{4});
    c.lr = j.value("lr", 1e-3);
    c.seed = j.value("seed", uint64_t{0});
    c.dst = j.value("dst", true);
    c.dst_weight_decay = j.value("dst_weight_decay", 1e-4);
    c.act_bits = j.value("act_bits", 0);
    c.fp_propagation = j.value("fp_propagation", false);
    c.calib_segments = j.value("calib_segments", int64_t{16});
    c.log_interval = j.value("log_interval", int64_t{25});
    return c;
  }
};

QuantSpec spec_from_config(const QuantRunConfig& c) {
  QuantSpec spec;
  spec.bits = c.bits;
  if (c.group_size > 0) {
    spec.granularity = Granularity::kPerGroup;
    spec.group_size = c.group_size;
  } else {
    spec.granularity = Granularity::kPerChannel;
  }
  spec.gamma = static_cast<float>(c.gamma);
  spec.beta = static_cast<float>(c.beta);
  return spec;
}

QuantizeModelOptions options_from_config(const QuantRunConfig& c) {
  QuantizeModelOptions o;
  o.spec = spec_from_config(c);
  o.par.schedule = parse_schedule(c.schedule);
  o.par.steps_per_iter = c.steps;
  o.par.batch_size = c.batch;
  o.par.lr = static_cast<float>(c.lr);
  o.par.dst_enabled = c.dst;
  o.par.dst_weight_decay = static_cast<float>(c.dst_weight_decay);
  o.par.act_bits = c.act_bits;
  o.par.seed = c.seed;
  o.par.log_interval = c.log_interval;
  o.calib_segments = c.calib_segments;
  o.fp_propagation = c.fp_propagation;
  o.search_clip_grid = c.search_clip;
  o.rtn_only = c.method == "rtn";
  return o;
}

DecoderModel load_model(const std::string& path) {
  return model_from_container(load_container(path));
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f.good()) throw IoError("write failed on " + path);
}

int cmd_quantize(const QuantRunConfig& cfg) {
  if (cfg.method != "par" && cfg.method != "rtn") {
    throw ArgumentError("method must be par or rtn");
  }
  DecoderModel model = load_model(cfg.model_path);
  DataArgs data{cfg.data_path, cfg.data_format, model.cfg.seq_len,
                model.cfg.vocab_size};
  TokenDataset calib = data.load();

  const json cfg_json = cfg.to_json();
  QuantizeModelResult result = quantize_model(
      model, calib, options_from_config(cfg), json{{"run", cfg_json}}.dump());
  save_container(cfg.out_path, result.container);

  std::string report_path = cfg.report_path;
  if (report_path.empty()) report_path = cfg.out_path + ".report.jsonl";
  std::string report_text = json{{"config", cfg_json}}.dump() + "\n";
  for (const auto& r : result.reports) {
    json flips = json::array();
    for (const auto& f : r.flips) {
      flips.push_back({{"layer", f.name},
                       {"count", f.count},
                       {"total", f.total},
                       {"percent", f.percent}});
    }
    report_text += json{{"block", r.block_index},
                        {"initial_loss", r.initial_loss},
                        {"final_loss", r.final_loss},
                        {"seconds", r.seconds},
                        {"flips", flips}}
                       .dump() +
                   "\n";
  }
  write_text_file(report_path, report_text);

  std::string trace_dir = cfg.trace_dir;
  if (trace_dir.empty()) {
    const auto parent = std::filesystem::path(cfg.out_path).parent_path();
    trace_dir = parent.empty() ? "." : parent.string();
  }
  for (const auto& r : result.reports) {
    std::string csv = "step,loss\n";
    for (size_t i = 0; i < r.loss_trace.size(); ++i) {
      csv += std::to_string((i + 1) * static_cast<size_t>(cfg.log_interval)) +
             "," + std::to_string(r.loss_trace[i]) + "\n";
    }
    write_text_file(trace_dir + "/block_" + std::to_string(r.block_index) +
                        "_trace.csv",
                    csv);
  }

  for (const auto& r : result.reports) {
    std::printf("block %lld  initial loss %.6g  final loss %.6g  (%.1fs)\n",
                static_cast<long long>(r.block_index), r.initial_loss,
                r.final_loss, r.seconds);
  }
  std::printf("wrote %s\n", cfg.out_path.c_str());
  std::printf("wrote %s\n", report_path.c_str());
  return 0;
}

int cmd_eval_ppl(const std::string& model_path, const DataArgs& data_args,
                 int act_bits, int64_t max_segments) {
  Container c = load_container(model_path);
  DecoderModel model = model_from_container(c);
  DataArgs d = data_args;
  d.seq_len = model.cfg.seq_len;
  d.vocab = model.cfg.vocab_size;
  TokenDataset data = d.load();

  const double ppl = perplexity(model, data, act_bits, max_segments);
  const Footprint fp = container_footprint(c);

  std::printf("perplexity %.6f\n", ppl);
  for (const auto& e : fp.entries) {
    if (e.quantized) {
      std::printf("  %-12s stored %8lld bytes  f32 %8lld bytes  (%.2fx)\n",
                  e.name.c_str(), static_cast<long long>(e.stored_bytes),
                  static_cast<long long>(e.f32_bytes),
                  static_cast<double>(e.f32_bytes) /
                      static_cast<double>(e.stored_bytes));
    }
  }
  std::printf("weight bytes f32 %lld\n",
              static_cast<long long>(fp.total_f32()));
  std::printf("weight bytes stored %lld\n",
              static_cast<long long>(fp.total_stored()));
  std::printf("compression %.3fx\n", static_cast<double>(fp.total_f32()) /
                                         static_cast<double>(fp.total_stored()));
  return 0;
}

int cmd_inspect_flips(const std::string& fp_path,
                      const std::string& quant_path) {
  Container fp = load_container(fp_path);
  Container qc = load_container(quant_path);
  std::printf("%-12s %10s %10s %8s\n", "layer", "flips", "total", "percent");
  for (const auto& [name, entry] : qc.entries) {
    if (!entry.is_quant()) continue;
    const ContainerEntry& fe = fp.at(name);
    if (fe.is_quant()) {
      throw ArgumentError("baseline container is already quantized at " +
                          name);
    }
    QuantizedTensor rtn = quantize_rtn(fe.tensor(), entry.quant().spec);
    const auto [count, pct] = count_flips(entry.quant(), rtn);
    std::printf("%-12s %10lld %10lld %7.3f%%\n", name.c_str(),
                static_cast<long long>(count),
                static_cast<long long>(entry.quant().numel()), pct);
  }
  return 0;
}

int cmd_ablate_schedule(QuantRunConfig base, const std::string& t_values,
                        const std::string& extra_schedules, int64_t iters,
                        const std::string& csv_out) {
  DecoderModel model = load_model(base.model_path);
  DataArgs data{base.data_path, base.data_format, model.cfg.seq_len,
                model.cfg.vocab_size};
  TokenDataset calib = data.load();

  std::vector<std::string> schedules;
  for (const auto& part : CLI::detail::split(t_values, ',')) {
    if (part.empty()) continue;
    schedules.push_back("exp:t=" + part + ",K=" + std::to_string(iters));
  }
  for (const auto& part : CLI::detail::split(extra_schedules, ';')) {
    if (!part.empty()) schedules.push_back(part);
  }
  if (schedules.empty()) throw ArgumentError("no schedules to sweep");

  std::string csv = "schedule,perplexity,mean_initial_loss,mean_final_loss\n";
  for (const auto& sched : schedules) {
    QuantRunConfig cfg = base;
    cfg.schedule = sched;
    QuantizeModelResult result = quantize_model(
        model, calib, options_from_config(cfg),
        json{{"run", cfg.to_json()}}.dump());
    DecoderModel qm = model_from_container(result.container);
    const double ppl = perplexity(qm, calib, cfg.act_bits);
    double init = 0.0, fin = 0.0;
    for (const auto& r : result.reports) {
      init += r.initial_loss;
      fin += r.final_loss;
    }
    init /= static_cast<double>(result.reports.size());
    fin /= static_cast<double>(result.reports.size());
    csv += "\"" + sched + "\"," + std::to_string(ppl) + "," +
           std::to_string(init) + "," + std::to_string(fin) + "\n";
    std::printf("%-24s ppl %.4f  mean loss %.6g -> %.6g\n", sched.c_str(),
                ppl, init, fin);
  }
  write_text_file(csv_out, csv);
  std::printf("wrote %s\n", csv_out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-training weight quantization toolkit"};
  app.require_subcommand(1);

  // train-toy
  auto* train = app.add_subcommand("train-toy",
                                   "train a small decoder checkpoint");
  DataArgs train_data;
  std::string train_out;
  int64_t pattern_bytes = 0;
  DecoderConfig train_cfg;
  TrainOptions train_opts;
  train_opts.log_interval = 100;
  train->add_option("--out", train_out, "output checkpoint")->required();
  train->add_option("--data", train_data.path,
                    "corpus file (omit to use a generated patterned corpus)");
  train->add_option("--format", train_data.format, "corpus format: text | u16")
      ->check(CLI::IsMember({"text", "u16"}));
  train->add_option("--pattern-bytes", pattern_bytes,
                    "size of the generated corpus when --data is omitted");
  train->add_option("--vocab", train_cfg.vocab_size, "vocabulary size");
  train->add_option("--d-model", train_cfg.d_model, "model width");
  train->add_option("--heads", train_cfg.n_heads, "attention heads");
  train->add_option("--blocks", train_cfg.n_blocks, "decoder blocks");
  train->add_option("--mlp-hidden", train_cfg.mlp_hidden, "mlp width");
  train->add_option("--seq-len", train_cfg.seq_len, "segment length");
  train->add_flag("--rope", train_cfg.rope_enabled,
                  "rotary positions instead of nothing extra");
  train->add_option("--steps", train_opts.steps, "training steps");
  train->add_option("--batch", train_opts.batch_size, "segments per step");
  train->add_option("--lr", train_opts.lr, "learning rate");
  train->add_option("--seed", train_opts.seed, "rng seed");
  train->add_option("--log-interval", train_opts.log_interval,
                    "steps between loss lines (0 = silent)");

  // quantize
  auto* quant = app.add_subcommand("quantize",
                                   "calibrate and write a quantized checkpoint");
  QuantRunConfig qcfg;
  std::string config_path;
  quant->add_option("--config", config_path,
                    "json run config; replaces every other flag");
  quant->add_option("--model", qcfg.model_path, "full-precision checkpoint");
  quant->add_option("--data", qcfg.data_path, "calibration corpus");
  quant->add_option("--format", qcfg.data_format, "corpus format: text | u16")
      ->check(CLI::IsMember({"text", "u16"}));
  quant->add_option("--out", qcfg.out_path, "output checkpoint");
  quant->add_option("--report", qcfg.report_path,
                    "jsonl report path (default: <out>.report.jsonl)");
  quant->add_option("--trace-dir", qcfg.trace_dir,
                    "directory for loss-trace csv files");
  quant->add_option("--method", qcfg.method, "par | rtn")
      ->check(CLI::IsMember({"par", "rtn"}));
  quant->add_option("--bits", qcfg.bits, "weight bits")->check(CLI::Range(2, 8));
  quant->add_option("--group-size", qcfg.group_size,
                    "group length along input dim (0 = per-channel)");
  quant->add_option("--gamma", qcfg.gamma, "max-clipping multiplier");
  quant->add_option("--beta", qcfg.beta, "min-clipping multiplier");
  quant->add_option("--search-clip", qcfg.search_clip,
                    "clipping grid search resolution (0 = off)");
  quant->add_option("--schedule", qcfg.schedule,
                    "exp:t=4,K=20 or list:10,30,...,100");
  quant->add_option("--steps", qcfg.steps, "optimizer steps per iteration");
  quant->add_option("--batch", qcfg.batch, "segments per optimizer step");
  quant->add_option("--lr", qcfg.lr, "learning rate");
  quant->add_option("--seed", qcfg.seed, "rng seed");
  bool no_dst = false;
  quant->add_flag("--no-dst", no_dst, "disable dequant factor tuning");
  quant->add_option("--dst-weight-decay", qcfg.dst_weight_decay,
                    "decoupled decay on the factor logits");
  bool quant_acts = false;
  quant->add_flag("--quant-acts", quant_acts,
                  "fake-quantize activations per token");
  quant->add_option("--act-bits", qcfg.act_bits,
                    "activation bits for --quant-acts")
      ->check(CLI::Range(2, 8));
  quant->add_flag("--fp-propagation", qcfg.fp_propagation,
                  "capture block inputs through the original fp blocks");
  quant->add_option("--calib-segments", qcfg.calib_segments,
                    "calibration segments to capture (0 = all)");
  quant->add_option("--log-interval", qcfg.log_interval,
                    "steps between trace points");

  // eval-ppl
  auto* eval = app.add_subcommand("eval-ppl", "perplexity and storage report");
  std::string eval_model;
  DataArgs eval_data;
  int eval_act_bits = 0;
  bool eval_quant_acts = false;
  int64_t eval_max_segments = 0;
  eval->add_option("--model", eval_model, "checkpoint (fp or quantized)")
      ->required();
  add_data_options(eval, eval_data, false);
  eval->add_flag("--quant-acts", eval_quant_acts,
                 "fake-quantize activations per token");
  eval->add_option("--act-bits", eval_act_bits, "activation bits")
      ->check(CLI::Range(2, 8));
  eval->add_option("--max-segments", eval_max_segments,
                   "limit evaluated segments (0 = all)");

  // inspect-flips
  auto* flips = app.add_subcommand(
      "inspect-flips", "per-layer code changes versus nearest rounding");
  std::string flips_fp, flips_quant;
  flips->add_option("--fp", flips_fp, "full-precision checkpoint")->required();
  flips->add_option("--quantized", flips_quant, "quantized checkpoint")
      ->required();

  // ablate-schedule
  auto* ablate = app.add_subcommand("ablate-schedule",
                                    "sweep hardening schedules, emit csv");
  QuantRunConfig acfg;
  std::string ablate_t = "2,3,4,5";
  std::string ablate_extra;
  std::string ablate_csv = "schedule_sweep.csv";
  int64_t ablate_iters = 20;
  ablate->add_option("--model", acfg.model_path, "full-precision checkpoint")
      ->required();
  ablate->add_option("--data", acfg.data_path, "calibration corpus")
      ->required();
  ablate->add_option("--format", acfg.data_format, "corpus format")
      ->check(CLI::IsMember({"text", "u16"}));
  ablate->add_option("--out", ablate_csv, "csv output path");
  ablate->add_option("--t-values", ablate_t,
                     "comma-separated temperatures for generated schedules");
  ablate->add_option("--schedules", ablate_extra,
                     "semicolon-separated extra schedule strings");
  ablate->add_option("--iters", ablate_iters, "iterations for generated schedules");
  ablate->add_option("--bits", acfg.bits, "weight bits")->check(CLI::Range(2, 8));
  ablate->add_option("--group-size", acfg.group_size, "group length (0 = per-channel)");
  ablate->add_option("--steps", acfg.steps, "optimizer steps per iteration");
  ablate->add_option("--batch", acfg.batch, "segments per optimizer step");
  ablate->add_option("--seed", acfg.seed, "rng seed");
  ablate->add_option("--calib-segments", acfg.calib_segments,
                     "calibration segments (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitValidation;
  }

  try {
    if (train->parsed()) {
      train_cfg.validate();
      TokenDataset data;
      if (!train_data.path.empty()) {
        train_data.seq_len = train_cfg.seq_len;
        train_data.vocab = train_cfg.vocab_size;
        data = train_data.load();
      } else {
        if (train_cfg.vocab_size < 256) {
          throw ArgumentError(
              "generated text corpus needs --vocab of at least 256");
        }
        if (pattern_bytes <= 0) pattern_bytes = 256 * 1024;
        data = dataset_from_tokens(
            [&] {
              std::vector<int32_t> toks;
              for (unsigned char ch :
                   make_patterned_text(pattern_bytes, train_opts.seed)) {
                toks.push_back(static_cast<int32_t>(ch));
              }
              return toks;
            }(),
            train_cfg.seq_len, train_cfg.vocab_size);
      }
      DecoderModel model = init_model(train_cfg, train_opts.seed);
      TrainResult tr = train_toy(model, data, train_opts);
      const double ppl = perplexity(model, data);
      save_container(train_out, container_from_model(model));
      std::printf("final train loss %.4f  perplexity %.4f\n", tr.final_loss,
                  ppl);
      std::printf("wrote %s\n", train_out.c_str());
      return 0;
    }
    if (quant->parsed()) {
      QuantRunConfig cfg = qcfg;
      if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw IoError("cannot open " + config_path);
        json j;
        try {
          f >> j;
        } catch (const json::parse_error& e) {
          throw DataError(std::string("bad config json: ") + e.what());
        }
        if (j.contains("config")) j = j["config"];  // accept a report line
        if (j.contains("run")) j = j["run"];        // or container meta
        try {
          cfg = QuantRunConfig::from_json(j);
        } catch (const json::exception& e) {
          throw DataError(std::string("bad config json: ") + e.what());
        }
      } else {
        cfg.dst = !no_dst;
        if (!quant_acts) {
          cfg.act_bits = 0;
        } else if (cfg.act_bits == 0) {
          cfg.act_bits = 8;
        }
        if (cfg.model_path.empty() || cfg.data_path.empty() ||
            cfg.out_path.empty()) {
          throw ArgumentError("--model, --data, and --out are required");
        }
      }
      return cmd_quantize(cfg);
    }
    if (eval->parsed()) {
      if (eval_quant_acts && eval_act_bits == 0) eval_act_bits = 8;
      if (!eval_quant_acts) eval_act_bits = 0;
      return cmd_eval_ppl(eval_model, eval_data, eval_act_bits,
                          eval_max_segments);
    }
    if (flips->parsed()) {
      return cmd_inspect_flips(flips_fp, flips_quant);
    }
    if (ablate->parsed()) {
      return cmd_ablate_schedule(acfg, ablate_t, ablate_extra, ablate_iters,
                                 ablate_csv);
    }
  } catch (const OptimizationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return 0;
}
