#include "ddec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace ddec {
namespace {

static_assert(std::endian::native == std::endian::little, "the container stores little-endian data");

using nlohmann::json;

constexpr std::uint32_t kVersion = 1;
constexpr char kCheckpointMagic[4] = {'D', 'D', 'E', 'C'};
constexpr char kPrefixMagic[4] = {'D', 'D', 'P', 'C'};

struct NamedTensor {
  std::string name;
  Matrix<float> value;
};

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void put_bytes(const void* data, std::size_t n) { bytes_.append(static_cast<const char*>(data), n); }
  const std::string& bytes() const noexcept { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof v), sizeof v);
    return v;
  }
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw Error(Errc::BadFormat, source_ + " is truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

void write_container(const std::filesystem::path& path, const char (&magic)[4], const json& header,
                     const std::vector<std::pair<std::string, const Matrix<float>*>>& tensors) {
  Writer w;
  w.put_bytes(magic, 4);
  w.put(kVersion);
  const std::string text = header.dump();
  w.put(static_cast<std::uint64_t>(text.size()));
  w.put_bytes(text.data(), text.size());
  w.put(static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(std::uint32_t{2});
    w.put(static_cast<std::uint64_t>(m->rows()));
    w.put(static_cast<std::uint64_t>(m->cols()));
    w.put_bytes(m->data(), static_cast<std::size_t>(m->size()) * sizeof(float));
  }

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot write '" + tmp.string() + "'");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw Error(Errc::Io, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::Io, "cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

struct Container {
  json header;
  std::map<std::string, Matrix<float>> tensors;
};

Container read_container(const std::filesystem::path& path, const char (&magic)[4]) {
  if (!std::filesystem::exists(path)) throw Error(Errc::FileNotFound, "'" + path.string() + "' does not exist");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Reader r(buffer.str(), "'" + path.string() + "'");
  if (std::memcmp(r.take(4), magic, 4) != 0) {
    throw Error(Errc::BadFormat, "'" + path.string() + "' has the wrong magic bytes");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw Error(Errc::BadFormat, "unsupported version " + std::to_string(version));
  const auto header_len = r.get<std::uint64_t>();
  Container c;
  try {
    c.header = json::parse(std::string_view(r.take(header_len), header_len));
  } catch (const json::parse_error& e) {
    throw Error(Errc::BadFormat, std::string("header is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len), name_len);
    if (r.get<std::uint32_t>() != 2) throw Error(Errc::BadFormat, "tensor '" + name + "' is not rank 2");
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows > (1ull << 32) || cols > (1ull << 32)) throw Error(Errc::BadFormat, "tensor '" + name + "' too large");
    Matrix<float> m(static_cast<Index>(rows), static_cast<Index>(cols));
    const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(float);
    if (n > 0) std::memcpy(m.data(), r.take(n), n);
    if (!c.tensors.emplace(std::move(name), std::move(m)).second) {
      throw Error(Errc::BadFormat, "duplicate tensor name");
    }
  }
  if (!r.at_end()) throw Error(Errc::BadFormat, "trailing bytes after the last tensor");
  return c;
}

// Moves `prefix + name` tensors into params, checking names and shapes.
void fill(ModelParams<float>& params, std::map<std::string, Matrix<float>>& tensors, const std::string& prefix) {
  for (auto& entry : parameter_list(params)) {
    const auto it = tensors.find(prefix + entry.name);
    if (it == tensors.end()) throw Error(Errc::CheckpointMismatch, "missing tensor '" + prefix + entry.name + "'");
    if (it->second.rows() != entry.value->rows() || it->second.cols() != entry.value->cols()) {
      throw Error(Errc::CheckpointMismatch, "tensor '" + it->first + "' has shape " +
                                                std::to_string(it->second.rows()) + "x" +
                                                std::to_string(it->second.cols()) + ", config expects " +
                                                std::to_string(entry.value->rows()) + "x" +
                                                std::to_string(entry.value->cols()));
    }
    *entry.value = std::move(it->second);
    tensors.erase(it);
  }
}

json state_json(const TrainingState& s) {
  return {{"phase", s.phase},
          {"steps_done", s.steps_done},
          {"total_steps", s.total_steps},
          {"tokens_seen", s.tokens_seen},
          {"pretrain_tokens", s.pretrain_tokens}};
}

TrainingState state_from(const json& j) {
  try {
    TrainingState s;
    s.phase = j.at("phase").get<std::string>();
    s.steps_done = j.at("steps_done").get<std::int64_t>();
    s.total_steps = j.at("total_steps").get<std::int64_t>();
    s.tokens_seen = j.at("tokens_seen").get<std::int64_t>();
    s.pretrain_tokens = j.at("pretrain_tokens").get<std::int64_t>();
    return s;
  } catch (const json::exception& e) {
    throw Error(Errc::BadFormat, std::string("bad training state: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header{{"config", json::parse(to_json(ckpt.config))},
              {"state", state_json(ckpt.state)},
              {"optimizer_step", ckpt.optimizer ? json(ckpt.optimizer->t) : json(nullptr)}};
  std::vector<std::pair<std::string, const Matrix<float>*>> tensors;
  for (const auto& e : parameter_list(ckpt.params)) tensors.emplace_back("param." + e.name, e.value);
  if (ckpt.optimizer) {
    for (const auto& e : parameter_list(ckpt.optimizer->m)) tensors.emplace_back("adam_m." + e.name, e.value);
    for (const auto& e : parameter_list(ckpt.optimizer->v)) tensors.emplace_back("adam_v." + e.name, e.value);
  }
  write_container(path, kCheckpointMagic, header, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path, kCheckpointMagic);
  if (!c.header.contains("config") || !c.header.contains("state")) {
    throw Error(Errc::BadFormat, "checkpoint header lacks config or state");
  }
  Checkpoint ckpt;
  ckpt.config = run_config_from_json(c.header["config"].dump());
  ckpt.state = state_from(c.header["state"]);
  ckpt.params = zero_params<float>(ckpt.config.model);
  fill(ckpt.params, c.tensors, "param.");
  const auto& step = c.header.contains("optimizer_step") ? c.header["optimizer_step"] : json(nullptr);
  if (!step.is_null()) {
    AdamState<float> adam;
    adam.m = zeros_like(ckpt.params);
    adam.v = zeros_like(ckpt.params);
    fill(adam.m, c.tensors, "adam_m.");
    fill(adam.v, c.tensors, "adam_v.");
    adam.t = step.get<std::int64_t>();
    ckpt.optimizer = std::move(adam);
  }
  if (!c.tensors.empty()) {
    throw Error(Errc::CheckpointMismatch, "unexpected tensor '" + c.tensors.begin()->first + "'");
  }
  return ckpt;
}

Checkpoint checkpoint_from(const Trainer& trainer, const RunConfig& config, TrainingState state) {
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.config.model = trainer.model().config();
  state.steps_done = trainer.steps_done();
  state.tokens_seen = trainer.tokens_seen();
  ckpt.state = std::move(state);
  ckpt.params = trainer.model().params();
  ckpt.optimizer = trainer.optimizer();
  return ckpt;
}

std::uint64_t params_fingerprint(const ModelParams<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& e : parameter_list(params)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(e.value->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(e.value->size()) * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

void save_prefix_cache(const std::filesystem::path& path, const PrefixCache<float>& cache,
                       const Model<float>& model) {
  json header{{"params_fingerprint", params_fingerprint(model.params())},
              {"d", model.config().d},
              {"layers", cache.layers.size()},
              {"tokens", cache.tokens}};
  std::vector<Matrix<float>> owned;
  owned.reserve(2 * cache.layers.size());
  for (const auto& layer : cache.layers) {
    owned.emplace_back(layer.k.view());
    owned.emplace_back(layer.v.view());
  }
  std::vector<std::pair<std::string, const Matrix<float>*>> tensors;
  for (std::size_t i = 0; i < cache.layers.size(); ++i) {
    tensors.emplace_back("k." + std::to_string(i), &owned[2 * i]);
    tensors.emplace_back("v." + std::to_string(i), &owned[2 * i + 1]);
  }
  tensors.emplace_back("latents", &cache.latents);
  write_container(path, kPrefixMagic, header, tensors);
}

PrefixCache<float> load_prefix_cache(const std::filesystem::path& path, const Model<float>& model) {
  Container c = read_container(path, kPrefixMagic);
  PrefixCache<float> cache;
  try {
    if (c.header.at("params_fingerprint").get<std::uint64_t>() != params_fingerprint(model.params())) {
      throw Error(Errc::PrefixMismatch, "prefix cache was built from different weights");
    }
    cache.tokens = c.header.at("tokens").get<Tokens>();
    const auto layers = c.header.at("layers").get<std::size_t>();
    for (std::size_t i = 0; i < layers; ++i) {
      auto k = c.tensors.find("k." + std::to_string(i));
      auto v = c.tensors.find("v." + std::to_string(i));
      if (k == c.tensors.end() || v == c.tensors.end()) throw Error(Errc::BadFormat, "missing cache layer");
      cache.layers.push_back({RowCache<float>(k->second), RowCache<float>(v->second)});
    }
    const auto latents = c.tensors.find("latents");
    if (latents == c.tensors.end()) throw Error(Errc::BadFormat, "missing cache latents");
    cache.latents = std::move(latents->second);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, std::string("bad prefix cache header: ") + e.what());
  }
  for (const auto& layer : cache.layers) {
    if (layer.k.rows() != cache.length() || layer.k.width() != model.config().d) {
      throw Error(Errc::PrefixMismatch, "prefix cache shape disagrees with the model");
    }
  }
  return cache;
}

}  // namespace ddec
