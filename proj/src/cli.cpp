#include "ddec/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ddec/data.hpp"

namespace ddec {
namespace {

using nlohmann::json;

std::vector<Tokens> head(const std::vector<Tokens>& seqs, Index n) {
  if (n <= 0 || static_cast<Index>(seqs.size()) <= n) return seqs;
  return {seqs.begin(), seqs.begin() + n};
}

PrefixBounds bounds_of(const TrainConfig& tc) { return {tc.min_prefix, tc.min_suffix}; }

std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  std::filesystem::path out = p;
  out.replace_extension();
  return out.string() + suffix;
}

void check_model_matches(const ModelConfig& want, const ModelConfig& have) {
  if (want == have) return;
  std::ostringstream msg;
  msg << "checkpoint holds a " << to_string(have.arch) << " model with d=" << have.d
      << ", config asks for " << to_string(want.arch) << " with d=" << want.d;
  if (want.arch == have.arch && want.d == have.d) msg << " (other model fields differ)";
  throw Error(Errc::CheckpointMismatch, msg.str());
}

}  // namespace

PreparedData prepare_data(const RunConfig& cfg) {
  if (cfg.data.corpus.empty()) throw Error(Errc::InvalidConfig, "data.corpus is not set");
  auto split = split_holdout(load_documents(cfg.data.corpus), cfg.data.holdout_fraction);
  PreparedData data;
  data.train = pack_sequences(split.train, cfg.data.seq_len);
  data.holdout = pack_sequences(split.holdout, cfg.data.seq_len);
  if (data.train.empty()) {
    throw Error(Errc::InvalidConfig, "corpus '" + cfg.data.corpus + "' yields no training sequence of " +
                                         std::to_string(cfg.data.seq_len) + " tokens");
  }
  return data;
}

MetricsLog::MetricsLog(std::filesystem::path path, std::int64_t keep_steps) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  auto keep = [&](const std::filesystem::path& p) {
    std::vector<std::string> lines;
    if (keep_steps > 0) {
      std::ifstream in(p);
      for (std::string line; static_cast<std::int64_t>(lines.size()) < keep_steps && std::getline(in, line);) {
        lines.push_back(line);
      }
    }
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot write metrics '" + p.string() + "'");
    for (const auto& line : lines) out << line << '\n';
  };
  keep(path_);
  keep(timing_path(path_));
}

std::filesystem::path MetricsLog::timing_path(const std::filesystem::path& metrics) {
  return metrics.string() + ".timing.jsonl";
}

void MetricsLog::record(std::string_view phase, const StepMetrics& m) {
  std::ofstream out(path_, std::ios::app);
  out << json{{"phase", phase},        {"step", m.step},           {"tokens_seen", m.tokens_seen},
              {"loss", m.loss},        {"lr", m.lr},               {"grad_norm", m.grad_norm},
              {"clipped_grad_norm", m.clipped_norm}}
             .dump()
      << '\n';
  std::ofstream timing(timing_path(path_), std::ios::app);
  timing << json{{"step", m.step}, {"seconds", m.seconds}, {"tokens_per_sec", m.tokens_per_sec}}.dump() << '\n';
  if (!out || !timing) throw Error(Errc::Io, "cannot append to metrics '" + path_.string() + "'");
}

TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  const std::int64_t total_steps = steps_for_budget(cfg.train.total_tokens, cfg.train.batch_size, cfg.data.seq_len);

  std::optional<Trainer> trainer;
  if (opt.resume) {
    Checkpoint ckpt = load_checkpoint(*opt.resume);
    check_model_matches(cfg.model, ckpt.config.model);
    if (!(ckpt.config.train == cfg.train) || !(ckpt.config.data == cfg.data)) {
      throw Error(Errc::CheckpointMismatch, "resuming needs the train and data sections the checkpoint was made with");
    }
    if (ckpt.state.phase != "pretrain" || !ckpt.optimizer) {
      throw Error(Errc::CheckpointMismatch, "checkpoint is not a resumable pretraining state");
    }
    trainer.emplace(Model<float>(cfg.model, std::move(ckpt.params)), cfg.train, Phase::Pretrain);
    trainer->optimizer() = std::move(*ckpt.optimizer);
    trainer->restore_progress(ckpt.state.steps_done, ckpt.state.tokens_seen);
  } else {
    trainer.emplace(Model<float>::initialized(cfg.model, cfg.train.seed), cfg.train, Phase::Pretrain);
  }

  const std::filesystem::path ckpt_path =
      opt.checkpoint_out.value_or(std::filesystem::path(cfg.io.checkpoint_dir) / "pretrain.ckpt");
  std::optional<MetricsLog> metrics;
  if (opt.write_metrics) metrics.emplace(cfg.io.metrics_path, opt.resume ? trainer->steps_done() : -1);

  auto state_now = [&] {
    TrainingState s;
    s.phase = "pretrain";
    s.total_steps = total_steps;
    if (trainer->steps_done() >= total_steps) s.pretrain_tokens = trainer->tokens_seen();
    return s;
  };
  RunOptions run;
  run.total_steps = total_steps;
  run.stop_after = opt.stop_after;
  run.on_step = [&](const StepMetrics& m) {
    if (metrics) metrics->record("pretrain", m);
  };
  run.on_checkpoint = [&](const Trainer& t) { save_checkpoint(ckpt_path, checkpoint_from(t, cfg, state_now())); };

  TrainResult result;
  result.summary = pretrain(*trainer, data.train, run);
  save_checkpoint(ckpt_path, checkpoint_from(*trainer, cfg, state_now()));
  result.total_steps = total_steps;
  result.tokens_seen = trainer->tokens_seen();
  result.checkpoint = ckpt_path;
  out << json{{"command", "train"},
              {"arch", to_string(cfg.model.arch)},
              {"steps", trainer->steps_done()},
              {"total_steps", total_steps},
              {"tokens_seen", trainer->tokens_seen()},
              {"first_loss", result.summary.first_loss},
              {"last_loss", result.summary.last_loss},
              {"checkpoint", ckpt_path.string()}}
             .dump()
      << '\n';
  return result;
}

SftResult cmd_sft(const SftOptions& opt, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  RunConfig cfg = ckpt.config;
  if (opt.config) {
    check_model_matches(opt.config->model, ckpt.config.model);
    cfg.train = opt.config->train;
    cfg.data = opt.config->data;
    cfg.io = opt.config->io;
  }
  cfg.command = "sft";
  cfg.validate();
  const PreparedData data = prepare_data(cfg);

  const bool resuming = ckpt.state.phase == "sft";
  const std::int64_t pretrain_tokens = resuming ? ckpt.state.pretrain_tokens : ckpt.state.tokens_seen;
  const auto budget = std::max<std::int64_t>(
      1, std::llround(cfg.train.sft_token_fraction * static_cast<double>(pretrain_tokens)));
  const std::int64_t total_steps = steps_for_budget(budget, cfg.train.sft_batch_size, cfg.data.seq_len);

  Trainer trainer(Model<float>(cfg.model, std::move(ckpt.params)), cfg.train, Phase::Sft);
  if (resuming && ckpt.optimizer) {
    trainer.optimizer() = std::move(*ckpt.optimizer);
    trainer.restore_progress(ckpt.state.steps_done, ckpt.state.tokens_seen);
  }
  const std::filesystem::path ckpt_path =
      opt.checkpoint_out.value_or(std::filesystem::path(cfg.io.checkpoint_dir) / "sft.ckpt");
  std::optional<MetricsLog> metrics;
  if (opt.write_metrics) {
    metrics.emplace(sibling(cfg.io.metrics_path, ".sft.jsonl"), resuming ? trainer.steps_done() : -1);
  }
  auto state_now = [&] {
    TrainingState s;
    s.phase = "sft";
    s.total_steps = total_steps;
    s.pretrain_tokens = pretrain_tokens;
    return s;
  };
  RunOptions run;
  run.total_steps = total_steps;
  run.stop_after = opt.stop_after;
  run.on_step = [&](const StepMetrics& m) {
    if (metrics) metrics->record("sft", m);
  };
  run.on_checkpoint = [&](const Trainer& t) { save_checkpoint(ckpt_path, checkpoint_from(t, cfg, state_now())); };

  SftResult result;
  result.summary = sft_prefix_lm(trainer, data.train, run);
  save_checkpoint(ckpt_path, checkpoint_from(trainer, cfg, state_now()));
  const auto& eval_set = data.holdout.empty() ? data.train : data.holdout;
  result.eval_loss = prefix_lm_eval(trainer.model(), head(eval_set, opt.max_eval_sequences), bounds_of(cfg.train));
  result.total_steps = total_steps;
  result.budget_tokens = budget;
  result.checkpoint = ckpt_path;
  out << json{{"command", "sft"},
              {"arch", to_string(cfg.model.arch)},
              {"steps", trainer.steps_done()},
              {"total_steps", total_steps},
              {"budget_tokens", budget},
              {"first_loss", result.summary.first_loss},
              {"last_loss", result.summary.last_loss},
              {"eval_split", data.holdout.empty() ? "train" : "holdout"},
              {"eval_loss", result.eval_loss},
              {"checkpoint", ckpt_path.string()}}
             .dump()
      << '\n';
  return result;
}

EvalResult cmd_eval(const EvalOptions& opt, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  RunConfig cfg = ckpt.config;
  if (opt.corpus) cfg.data.corpus = *opt.corpus;
  const PreparedData data = prepare_data(cfg);
  const Model<float> model(cfg.model, std::move(ckpt.params));
  const PrefixBounds bounds = bounds_of(cfg.train);

  EvalResult r;
  const auto train = head(data.train, opt.max_sequences);
  const auto holdout = head(data.holdout, opt.max_sequences);
  r.train_sequences = static_cast<Index>(train.size());
  r.holdout_sequences = static_cast<Index>(holdout.size());
  r.train_loss = prefix_lm_eval(model, train, bounds);
  json record{{"command", "eval"},
              {"arch", to_string(cfg.model.arch)},
              {"train_loss", r.train_loss},
              {"train_sequences", r.train_sequences},
              {"holdout_sequences", r.holdout_sequences}};
  if (!holdout.empty()) {
    r.holdout_loss = prefix_lm_eval(model, holdout, bounds);
    record["holdout_loss"] = r.holdout_loss;
  } else {
    r.holdout_loss = std::nan("");
    record["holdout_loss"] = nullptr;
  }
  out << record.dump() << '\n';
  return r;
}

GenerationReport cmd_generate(const GenerateOptions& opt, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  const Model<float> model(ckpt.config.model, std::move(ckpt.params));
  const Tokens prompt = ByteTokenizer::encode(opt.prompt);
  if (static_cast<Index>(prompt.size()) > model.config().max_seq_len) {
    throw Error(Errc::SeqTooLong, "prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                                      std::to_string(model.config().max_seq_len));
  }
  std::optional<PrefixCache<float>> loaded;
  PrefixCache<float> built;
  const bool use_cache = opt.prefix_cache.has_value();
  if (use_cache && model.config().arch != Arch::DoubleDecoder) {
    throw Error(Errc::InvalidConfig, "--prefix-cache needs a double_decoder checkpoint");
  }
  if (use_cache && std::filesystem::exists(*opt.prefix_cache)) loaded = load_prefix_cache(*opt.prefix_cache, model);

  GenerationReport report = generate(model, prompt, opt.max_new, opt.sampler, opt.seed, opt.bytes_per_value,
                                     loaded ? &*loaded : nullptr, use_cache ? &built : nullptr);
  if (use_cache && (!loaded || loaded->length() < built.length())) save_prefix_cache(*opt.prefix_cache, built, model);

  out << ByteTokenizer::decode(report.tokens) << '\n';
  out << json{{"ttft_ops", report.ttft_ops},
              {"per_token_ops", report.per_token_ops},
              {"kv_bytes", report.kv_bytes},
              {"tokens", report.tokens},
              {"context_ops", report.context_ops},
              {"context_tokens", report.context_len},
              {"new_context_tokens", report.new_context_tokens},
              {"decode_steps", report.decode_steps},
              {"seconds", report.seconds}}
             .dump()
      << '\n';
  return report;
}

namespace {

nlohmann::ordered_json report_json(const CostReport& r) {
  using ojson = nlohmann::ordered_json;
  const auto& in = r.inputs;
  ojson j{{"arch", to_string(in.arch)},
         {"d", in.d},
         {"L", in.L},
         {"T", in.T},
         {"T_in", in.T_in},
         {"T_out", in.T_out},
         {"b", in.b},
         {"train_flops_per_seq", r.train_flops_per_seq},
         {"six_nt", r.six_nt},
         {"kv_bytes", r.kv_bytes},
         {"kv_ratio", r.kv_ratio},
         {"ttft_ratio", r.ttft_ratio},
         {"per_token_ratio", r.per_token_ratio}};
  if (in.arch != CostArch::DecoderOnly) {
    j["L_enc"] = in.L_enc;
    j["L_dec"] = in.L_dec;
  }
  j["audit_implementation"] = r.audit_implementation ? ojson(*r.audit_implementation) : ojson(nullptr);
  j["audit_ideal"] = r.audit_ideal ? ojson(*r.audit_ideal) : ojson(nullptr);
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

}  // namespace

void cmd_cost(const CostInputs& in, CostFormat format, std::ostream& out) {
  const CostReport r = cost_report(in);
  const auto j = report_json(r);
  if (format == CostFormat::Json) {
    out << j.dump() << '\n';
    return;
  }
  std::size_t width = 0;
  for (const auto& [key, value] : j.items()) width = std::max(width, key.size());
  for (const auto& [key, value] : j.items()) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << key;
    out << (value.is_string() ? value.get<std::string>() : value.dump()) << '\n';
  }
}

void cmd_cost_sweep(const std::vector<CostArch>& archs, const std::vector<Index>& Ts, const std::vector<Index>& ds,
                    const std::vector<Index>& Ls, Index T_out, Index b, std::ostream& out) {
  if (archs.empty() || Ts.empty() || ds.empty() || Ls.empty()) throw Error(Errc::EmptyGrid, "cost sweep grid is empty");
  out << "arch,T,d,L,L_enc,L_dec,T_in,T_out,b,train_flops_per_seq,six_nt,audit_implementation,audit_ideal,"
         "kv_bytes,kv_ratio,ttft_ratio,per_token_ratio\n";
  auto opt = [](const std::optional<Count>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const CostArch arch : archs) {
    for (const Index T : Ts) {
      for (const Index d : ds) {
        for (const Index L : Ls) {
          CostInputs in;
          in.arch = arch;
          in.T = T;
          in.T_in = T;
          in.T_out = T_out;
          in.d = d;
          in.L = L;
          in.L_dec = L / 3;
          in.L_enc = L - in.L_dec;
          in.b = b;
          in.head_dim = std::min<Index>(64, d);
          const CostReport r = cost_report(in);
          const bool stacked = arch != CostArch::DecoderOnly;
          out << to_string(arch) << ',' << T << ',' << d << ',' << L << ','
              << (stacked ? std::to_string(in.L_enc) : "") << ',' << (stacked ? std::to_string(in.L_dec) : "") << ','
              << in.T_in << ',' << T_out << ',' << b << ',' << r.train_flops_per_seq << ',' << r.six_nt << ','
              << opt(r.audit_implementation) << ',' << opt(r.audit_ideal) << ',' << r.kv_bytes << ','
              << r.kv_ratio << ',' << r.ttft_ratio << ',' << r.per_token_ratio << '\n';
        }
      }
    }
  }
}

std::vector<SweepRow> cmd_sweep_lr(const RunConfig& cfg, const SweepOptions& opt, std::ostream& csv) {
  if (opt.lrs.empty() || opt.widths.empty()) throw Error(Errc::EmptyGrid, "sweep-lr needs at least one lr and one width");
  const PreparedData data = prepare_data(cfg);
  const auto& eval_set = data.holdout.empty() ? data.train : data.holdout;
  const auto eval_seqs = head(eval_set, opt.max_eval_sequences);

  csv << "width,lr,steps,final_train_loss,holdout_loss\n";
  std::vector<SweepRow> rows;
  for (const Index width : opt.widths) {
    for (const double lr : opt.lrs) {
      RunConfig run = cfg;
      run.model.d = width;
      run.train.base_lr = lr;
      run.validate();
      Trainer trainer(Model<float>::initialized(run.model, run.train.seed), run.train, Phase::Pretrain);
      const std::int64_t total = steps_for_budget(run.train.total_tokens, run.train.batch_size, run.data.seq_len);
      std::vector<double> losses;
      RunOptions ro;
      ro.total_steps = total;
      ro.on_step = [&](const StepMetrics& m) { losses.push_back(m.loss); };
      pretrain(trainer, data.train, ro);
      const std::size_t tail = std::max<std::size_t>(1, losses.size() / 10);
      double sum = 0.0;
      for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) sum += losses[i];
      SweepRow row{width, lr, total, sum / static_cast<double>(tail),
                   prefix_lm_eval(trainer.model(), eval_seqs, bounds_of(run.train))};
      csv << row.width << ',' << json(row.lr).dump() << ',' << row.steps << ',' << json(row.final_train_loss).dump()
          << ',' << json(row.holdout_loss).dump() << '\n';
      rows.push_back(row);
    }
  }
  return rows;
}

std::vector<std::pair<Index, double>> sweep_argmin(const std::vector<SweepRow>& rows) {
  std::map<Index, const SweepRow*> best;
  for (const auto& row : rows) {
    auto& slot = best[row.width];
    if (!slot || row.holdout_loss < slot->holdout_loss) slot = &row;
  }
  std::vector<std::pair<Index, double>> out;
  for (const auto& [width, row] : best) out.emplace_back(width, row->lr);
  return out;
}

}  // namespace ddec
