#include <deque>
#include <fstream>
#include <iostream>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ddec/cli.hpp"
#include "ddec/masks.hpp"

namespace {

using namespace ddec;

// Flags that map one-to-one onto config keys.
struct ConfigFlags {
  std::optional<std::string> config_path;
  std::vector<std::string> sets;
  std::deque<std::pair<std::string, std::optional<std::string>>> storage;  // stable addresses for CLI11

  void add(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    storage.emplace_back(key, std::nullopt);
    app.add_option(flag, storage.back().second, help);
  }

  RunConfig build(const std::optional<RunConfig>& base = std::nullopt) const {
    RunConfig cfg = config_path ? load_run_config(*config_path) : base.value_or(RunConfig{});
    apply_environment(cfg);
    std::vector<std::string> assignments;
    for (const auto& [key, value] : storage) {
      if (!value) continue;
      const bool is_string = key == "model.arch" || key == "data.corpus" || key == "io.metrics_path" ||
                             key == "io.checkpoint_dir";
      assignments.push_back(key + "=" + (is_string ? "\"" + *value + "\"" : *value));
    }
    assignments.insert(assignments.end(), sets.begin(), sets.end());
    apply_overrides(cfg, assignments);
    return cfg;
  }

  bool any() const {
    if (config_path || !sets.empty()) return true;
    for (const auto& [key, value] : storage) {
      if (value) return true;
    }
    return false;
  }
};

void add_config_flags(CLI::App& app, ConfigFlags& f) {
  app.add_option("--config", f.config_path, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--set", f.sets, "Override a config field: section.key=value (repeatable)");
  f.add(app, "--corpus", "data.corpus", "Training corpus (UTF-8 text, blank-line separated documents)");
  f.add(app, "--arch", "model.arch", "decoder_only or double_decoder");
  f.add(app, "--d", "model.d", "Model width");
  f.add(app, "--seq-len", "data.seq_len", "Packed sequence length");
  f.add(app, "--total-tokens", "train.total_tokens", "Pretraining token budget");
  f.add(app, "--batch-size", "train.batch_size", "Sequences per batch");
  f.add(app, "--base-lr", "train.base_lr", "Base learning rate before width scaling");
  f.add(app, "--seed", "train.seed", "Run seed");
  f.add(app, "--metrics", "io.metrics_path", "Metrics log path");
  f.add(app, "--checkpoint-dir", "io.checkpoint_dir", "Checkpoint directory");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    try {
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item)));
      } else {
        out.push_back(static_cast<T>(std::stoll(item)));
      }
    } catch (const std::exception&) {
      throw Error(Errc::InvalidConfig, "cannot parse '" + item + "' in list '" + text + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Double-decoder language model toolkit"};
  app.require_subcommand(0, 1);
  std::optional<std::string> dump_masks;
  app.add_option("--dump-masks", dump_masks, "Print the attention masks of a partition such as 0,2,5,7 and exit");

  ConfigFlags train_flags;
  TrainOptions train_opt;
  std::optional<std::string> resume;
  auto* train = app.add_subcommand("train", "Pretrain a model");
  add_config_flags(*train, train_flags);
  train->add_option("--resume", resume, "Continue from a pretraining checkpoint")->check(CLI::ExistingFile);
  train->add_option("--stop-after", train_opt.stop_after, "Stop once this many steps are done");

  ConfigFlags sft_flags;
  SftOptions sft_opt;
  std::string sft_ckpt;
  auto* sft = app.add_subcommand("sft", "Prefix-LM fine-tuning of a pretrained checkpoint");
  sft->add_option("--checkpoint", sft_ckpt, "Pretraining checkpoint")->required();
  add_config_flags(*sft, sft_flags);
  sft->add_option("--stop-after", sft_opt.stop_after, "Stop once this many steps are done");
  sft->add_option("--max-eval-sequences", sft_opt.max_eval_sequences, "Evaluation sequences (0: all)");

  EvalOptions eval_opt;
  std::string eval_ckpt;
  std::optional<std::string> eval_corpus;
  auto* eval = app.add_subcommand("eval", "Prefix-LM cross entropy on the train and holdout splits");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--corpus", eval_corpus, "Corpus (defaults to the checkpoint's)");
  eval->add_option("--max-sequences", eval_opt.max_sequences, "Sequences per split (0: all)");

  GenerateOptions gen_opt;
  std::string gen_ckpt;
  std::optional<std::string> prefix_cache;
  auto* gen = app.add_subcommand("generate", "Generate text with the KV-cached decoder");
  gen->add_option("--checkpoint", gen_ckpt, "Checkpoint")->required();
  gen->add_option("--prompt", gen_opt.prompt, "Prompt text")->required();
  gen->add_option("--max-new", gen_opt.max_new, "Tokens to generate");
  gen->add_option("--temperature", gen_opt.sampler.temperature, "Sampling temperature (0: greedy)");
  gen->add_flag("--greedy", "Greedy decoding (the default)");
  gen->add_flag("--stop-at-eos", gen_opt.sampler.stop_at_eos, "Stop after emitting EOS");
  gen->add_option("--seed", gen_opt.seed, "Sampling seed");
  gen->add_option("--prefix-cache", prefix_cache, "Prefix cache file, loaded when present and written otherwise");
  gen->add_option("--bytes", gen_opt.bytes_per_value, "Bytes per cached value in the memory report");

  CostInputs cost_in;
  std::string cost_arch = "double_decoder";
  bool cost_json = false;
  bool cost_sweep = false;
  std::string sweep_archs = "decoder_only,double_decoder", sweep_Ts = "128,512,2048", sweep_ds = "64,256,512",
              sweep_Ls = "3,12";
  auto* cost = app.add_subcommand("cost", "Analytical FLOP and KV-cache report");
  cost->add_option("--arch", cost_arch, "decoder_only, encoder_decoder or double_decoder");
  cost->add_option("--d", cost_in.d, "Width");
  cost->add_option("--L", cost_in.L, "Total depth");
  cost->add_option("--L-enc", cost_in.L_enc, "Context decoder or encoder depth");
  cost->add_option("--L-dec", cost_in.L_dec, "Generation decoder depth");
  cost->add_option("--T", cost_in.T, "Training sequence length");
  cost->add_option("--T-in", cost_in.T_in, "Input length");
  cost->add_option("--T-out", cost_in.T_out, "Output length");
  cost->add_option("--b", cost_in.b, "Bytes per cached value");
  cost->add_option("--head-dim", cost_in.head_dim, "Head width used by the audit");
  cost->add_flag("--json", cost_json, "Emit one JSON record instead of a table");
  cost->add_flag("--sweep", cost_sweep, "Emit CSV over the grids below");
  cost->add_option("--archs", sweep_archs, "Sweep: comma-separated architectures");
  cost->add_option("--Ts", sweep_Ts, "Sweep: comma-separated T values");
  cost->add_option("--ds", sweep_ds, "Sweep: comma-separated d values");
  cost->add_option("--Ls", sweep_Ls, "Sweep: comma-separated L values");

  ConfigFlags sweep_flags;
  std::string lrs = "0.003,0.01,0.03,0.1";
  std::string widths = "64,128";
  std::optional<std::string> sweep_out;
  Index sweep_eval = 64;
  auto* sweep = app.add_subcommand("sweep-lr", "Train across an lr x width grid and write a CSV");
  add_config_flags(*sweep, sweep_flags);
  sweep->add_option("--lrs", lrs, "Comma-separated base learning rates");
  sweep->add_option("--widths", widths, "Comma-separated widths");
  sweep->add_option("--out", sweep_out, "CSV path (default stdout)");
  sweep->add_option("--max-eval-sequences", sweep_eval, "Holdout sequences per evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(Errc::InvalidConfig);
  }

  try {
    if (dump_masks) {
      std::cout << render_masks(block_masks(BlockPartition::parse(*dump_masks)));
      return 0;
    }
    if (*train) {
      RunConfig cfg = train_flags.build();
      cfg.command = "train";
      if (resume) train_opt.resume = *resume;
      cmd_train(cfg, train_opt, std::cout);
    } else if (*sft) {
      sft_opt.checkpoint = sft_ckpt;
      if (sft_flags.any()) sft_opt.config = sft_flags.build(load_checkpoint(sft_ckpt).config);
      cmd_sft(sft_opt, std::cout);
    } else if (*eval) {
      eval_opt.checkpoint = eval_ckpt;
      eval_opt.corpus = eval_corpus;
      cmd_eval(eval_opt, std::cout);
    } else if (*gen) {
      gen_opt.checkpoint = gen_ckpt;
      if (prefix_cache) gen_opt.prefix_cache = *prefix_cache;
      cmd_generate(gen_opt, std::cout);
    } else if (*cost) {
      if (cost_sweep) {
        std::vector<CostArch> archs;
        for (const auto& a : split_list(sweep_archs)) archs.push_back(parse_cost_arch(a));
        cmd_cost_sweep(archs, parse_list<Index>(sweep_Ts), parse_list<Index>(sweep_ds), parse_list<Index>(sweep_Ls),
                       cost_in.T_out, cost_in.b, std::cout);
      } else {
        cost_in.arch = parse_cost_arch(cost_arch);
        cmd_cost(cost_in, cost_json ? CostFormat::Json : CostFormat::Table, std::cout);
      }
    } else if (*sweep) {
      RunConfig cfg = sweep_flags.build();
      cfg.command = "sweep-lr";
      SweepOptions so{parse_list<double>(lrs), parse_list<Index>(widths), sweep_eval};
      if (sweep_out) {
        std::ofstream csv(*sweep_out);
        if (!csv) throw Error(Errc::Io, "cannot write '" + *sweep_out + "'");
        cmd_sweep_lr(cfg, so, csv);
      } else {
        cmd_sweep_lr(cfg, so, std::cout);
      }
    } else {
      std::cout << app.help();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 8;
  }
  return 0;
}
