#include "ddec/run_config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ddec {
namespace {

using nlohmann::json;

json model_json(const ModelConfig& m) {
  return {{"arch", std::string(to_string(m.arch))},
          {"d", m.d},
          {"head_dim", m.head_dim},
          {"layers", m.layers},
          {"context_layers", m.context_layers},
          {"generation_layers", m.generation_layers},
          {"vocab_size", m.vocab_size},
          {"base_width", m.base_width},
          {"ffn_mult", m.ffn_mult},
          {"max_seq_len", m.max_seq_len},
          {"rope_base", m.rope_base}};
}

json train_json(const TrainConfig& t) {
  return {{"base_lr", t.base_lr},
          {"weight_decay", t.weight_decay ? json(*t.weight_decay) : json(nullptr)},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"warmup_frac", t.warmup_frac},
          {"final_lr_frac", t.final_lr_frac},
          {"grad_clip", t.grad_clip},
          {"batch_size", t.batch_size},
          {"total_tokens", t.total_tokens},
          {"seed", t.seed},
          {"min_blocks", t.min_blocks},
          {"max_blocks", t.max_blocks},
          {"min_block_len", t.min_block_len},
          {"min_prefix", t.min_prefix},
          {"min_suffix", t.min_suffix},
          {"sft_base_lr", t.sft_base_lr},
          {"sft_batch_size", t.sft_batch_size},
          {"sft_token_fraction", t.sft_token_fraction},
          {"checkpoint_every", t.checkpoint_every}};
}

json run_json(const RunConfig& c) {
  return {{"command", c.command},
          {"model", model_json(c.model)},
          {"train", train_json(c.train)},
          {"data",
           {{"corpus", c.data.corpus},
            {"tokenizer", c.data.tokenizer},
            {"seq_len", c.data.seq_len},
            {"holdout_fraction", c.data.holdout_fraction}}},
          {"io", {{"checkpoint_dir", c.io.checkpoint_dir}, {"metrics_path", c.io.metrics_path}}}};
}

// Reads section[key] into out, keeping the default when absent.
class Reader {
 public:
  Reader(const json& section, std::string name) : section_(section), name_(std::move(name)) {
    if (!section_.is_object()) fail("", "must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = section_.find(key);
    if (it == section_.end()) return;
    try {
      if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) fail(key, "must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_unsigned() || it->template get<std::int64_t>() >= 0) {
            out = it->template get<T>();
            return;
          }
          fail(key, "must be non-negative");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) fail(key, "must be a number");
      } else {
        if (!it->is_string()) fail(key, "must be a string");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      fail(key, e.what());
    }
  }

  void get_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    const auto it = section_.find(key);
    if (it == section_.end() || it->is_null()) return;
    if (!it->is_number()) fail(key, "must be a number or null");
    out = it->get<double>();
  }

  void finish() const {
    for (const auto& [key, value] : section_.items()) {
      if (!seen_.count(key)) fail(key, "unknown key");
    }
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw Error(Errc::InvalidConfig, name_ + (key.empty() ? "" : "." + key) + ": " + what);
  }

  const json& section_;
  std::string name_;
  std::set<std::string> seen_;
};

RunConfig from_json_value(const json& root) {
  if (!root.is_object()) throw Error(Errc::InvalidConfig, "config root must be an object");
  static const std::set<std::string> sections{"command", "model", "train", "data", "io"};
  for (const auto& [key, value] : root.items()) {
    if (!sections.count(key)) throw Error(Errc::InvalidConfig, "unknown key '" + key + "'");
  }
  RunConfig c;
  if (root.contains("command")) {
    if (!root["command"].is_string()) throw Error(Errc::InvalidConfig, "command must be a string");
    c.command = root["command"].get<std::string>();
  }
  const json empty = json::object();
  {
    Reader r(root.contains("model") ? root["model"] : empty, "model");
    std::string arch(to_string(c.model.arch));
    r.get("arch", arch);
    c.model.arch = parse_arch(arch);
    r.get("d", c.model.d);
    r.get("head_dim", c.model.head_dim);
    r.get("layers", c.model.layers);
    r.get("context_layers", c.model.context_layers);
    r.get("generation_layers", c.model.generation_layers);
    r.get("vocab_size", c.model.vocab_size);
    r.get("base_width", c.model.base_width);
    r.get("ffn_mult", c.model.ffn_mult);
    r.get("max_seq_len", c.model.max_seq_len);
    r.get("rope_base", c.model.rope_base);
    r.finish();
  }
  {
    Reader r(root.contains("train") ? root["train"] : empty, "train");
    auto& t = c.train;
    r.get("base_lr", t.base_lr);
    r.get_optional("weight_decay", t.weight_decay);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("eps", t.eps);
    r.get("warmup_frac", t.warmup_frac);
    r.get("final_lr_frac", t.final_lr_frac);
    r.get("grad_clip", t.grad_clip);
    r.get("batch_size", t.batch_size);
    r.get("total_tokens", t.total_tokens);
    r.get("seed", t.seed);
    r.get("min_blocks", t.min_blocks);
    r.get("max_blocks", t.max_blocks);
    r.get("min_block_len", t.min_block_len);
    r.get("min_prefix", t.min_prefix);
    r.get("min_suffix", t.min_suffix);
    r.get("sft_base_lr", t.sft_base_lr);
    r.get("sft_batch_size", t.sft_batch_size);
    r.get("sft_token_fraction", t.sft_token_fraction);
    r.get("checkpoint_every", t.checkpoint_every);
    r.finish();
  }
  {
    Reader r(root.contains("data") ? root["data"] : empty, "data");
    r.get("corpus", c.data.corpus);
    r.get("tokenizer", c.data.tokenizer);
    r.get("seq_len", c.data.seq_len);
    r.get("holdout_fraction", c.data.holdout_fraction);
    r.finish();
  }
  {
    Reader r(root.contains("io") ? root["io"] : empty, "io");
    r.get("checkpoint_dir", c.io.checkpoint_dir);
    r.get("metrics_path", c.io.metrics_path);
    r.finish();
  }
  return c;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.tokenizer != "byte") {
    throw Error(Errc::InvalidConfig, "tokenizer '" + data.tokenizer + "' unsupported; only 'byte' exists");
  }
  if (data.seq_len < 2 || data.seq_len > model.max_seq_len) {
    throw Error(Errc::InvalidConfig, "data.seq_len must lie in [2, model.max_seq_len]");
  }
  if (!(data.holdout_fraction >= 0.0 && data.holdout_fraction < 1.0)) {
    throw Error(Errc::InvalidConfig, "data.holdout_fraction must lie in [0, 1)");
  }
  if (model.vocab_size < 259) {
    throw Error(Errc::InvalidConfig, "the byte tokenizer needs vocab_size >= 259");
  }
}

std::string to_json(const RunConfig& cfg, int indent) { return run_json(cfg).dump(indent); }

RunConfig run_config_from_json(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  return from_json_value(root);
}

RunConfig load_run_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error(Errc::FileNotFound, "config '" + path + "' does not exist");
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open config '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return run_config_from_json(buffer.str());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  if (assignments.empty()) return;
  json root = run_json(cfg);
  for (const auto& assignment : assignments) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw Error(Errc::InvalidConfig, "override '" + assignment + "' is not section.key=value");
    }
    const std::string section = assignment.substr(0, dot);
    const std::string key = assignment.substr(dot + 1, eq - dot - 1);
    const std::string raw = assignment.substr(eq + 1);
    if (!root.contains(section) || !root[section].is_object()) {
      throw Error(Errc::InvalidConfig, "unknown section '" + section + "'");
    }
    if (!root[section].contains(key)) throw Error(Errc::InvalidConfig, "unknown key '" + section + "." + key + "'");
    json value = json::parse(raw, nullptr, false);
    root[section][key] = value.is_discarded() ? json(raw) : value;
  }
  cfg = from_json_value(root);
}

void apply_environment(RunConfig& cfg) {
  if (const char* seed = std::getenv("SEED"); seed && *seed) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(seed, &end, 10);
    if (*end != '\0' || seed[0] == '-') throw Error(Errc::InvalidConfig, "SEED must be a non-negative integer");
    cfg.train.seed = v;
  }
  if (const char* dir = std::getenv("METRICS_DIR"); dir && *dir) {
    cfg.io.metrics_path =
        (std::filesystem::path(dir) / std::filesystem::path(cfg.io.metrics_path).filename()).string();
  }
}

}  // namespace ddec
