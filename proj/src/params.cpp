#include "ddec/params.hpp"

#include <cmath>
#include <random>
#include <type_traits>

namespace ddec {
namespace {

template <typename L, typename F>
void visit_linear(L& linear, const std::string& name, F& f) {
  f(name + ".weight", linear.weight);
  f(name + ".bias", linear.bias);
}

template <typename N, typename F>
void visit_norm(N& norm, const std::string& name, F& f) {
  f(name + ".gain", norm.gain);
  f(name + ".bias", norm.bias);
}

// Calls f(name, matrix) for every tensor, const-ness following P.
template <typename P, typename F>
void visit(P& params, F&& f) {
  f(std::string("embedding"), params.embedding);
  for (std::size_t i = 0; i < params.causal.size(); ++i) {
    auto& b = params.causal[i];
    const std::string prefix = "causal." + std::to_string(i);
    visit_norm(b.norm1, prefix + ".norm1", f);
    visit_linear(b.attn.q, prefix + ".attn.q", f);
    visit_linear(b.attn.k, prefix + ".attn.k", f);
    visit_linear(b.attn.v, prefix + ".attn.v", f);
    visit_linear(b.attn.o, prefix + ".attn.o", f);
    visit_norm(b.norm2, prefix + ".norm2", f);
    visit_linear(b.ffn.up, prefix + ".ffn.up", f);
    visit_linear(b.ffn.down, prefix + ".ffn.down", f);
  }
  visit_norm(params.causal_norm, "causal_norm", f);
  for (std::size_t i = 0; i < params.generation.size(); ++i) {
    auto& b = params.generation[i];
    const std::string prefix = "generation." + std::to_string(i);
    visit_norm(b.norm1, prefix + ".norm1", f);
    visit_linear(b.attn.q, prefix + ".attn.q", f);
    visit_linear(b.attn.k_self, prefix + ".attn.k_self", f);
    visit_linear(b.attn.v_self, prefix + ".attn.v_self", f);
    visit_linear(b.attn.k_cross, prefix + ".attn.k_cross", f);
    visit_linear(b.attn.v_cross, prefix + ".attn.v_cross", f);
    visit_linear(b.attn.o, prefix + ".attn.o", f);
    visit_norm(b.norm2, prefix + ".norm2", f);
    visit_linear(b.ffn.up, prefix + ".ffn.up", f);
    visit_linear(b.ffn.down, prefix + ".ffn.down", f);
  }
  if (!params.generation.empty()) visit_norm(params.generation_norm, "generation_norm", f);
}

template <typename Scalar>
Linear<Scalar> shaped_linear(Index in, Index out) {
  return {Matrix<Scalar>::Zero(in, out), Matrix<Scalar>::Zero(1, out)};
}

template <typename Scalar>
LayerNorm<Scalar> shaped_norm(Index d) {
  return {Matrix<Scalar>::Ones(1, d), Matrix<Scalar>::Zero(1, d)};
}

template <typename Scalar>
ModelParams<Scalar> shaped(const ModelConfig& cfg) {
  const Index d = cfg.d;
  const Index f = cfg.ffn_width();
  ModelParams<Scalar> p;
  p.embedding = Matrix<Scalar>::Zero(cfg.vocab_size, d);
  p.causal.resize(static_cast<std::size_t>(cfg.causal_layers()));
  for (auto& b : p.causal) {
    b.norm1 = shaped_norm<Scalar>(d);
    b.attn = {shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d),
              shaped_linear<Scalar>(d, d)};
    b.norm2 = shaped_norm<Scalar>(d);
    b.ffn = {shaped_linear<Scalar>(d, f), shaped_linear<Scalar>(f, d)};
  }
  p.causal_norm = shaped_norm<Scalar>(d);
  if (cfg.arch == Arch::DoubleDecoder) {
    p.generation.resize(static_cast<std::size_t>(cfg.generation_layers));
    for (auto& b : p.generation) {
      b.norm1 = shaped_norm<Scalar>(d);
      b.attn = {shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d),
                shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d), shaped_linear<Scalar>(d, d)};
      b.norm2 = shaped_norm<Scalar>(d);
      b.ffn = {shaped_linear<Scalar>(d, f), shaped_linear<Scalar>(f, d)};
    }
    p.generation_norm = shaped_norm<Scalar>(d);
  }
  return p;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename Scalar>
std::vector<NamedParam<Scalar>> parameter_list(ModelParams<Scalar>& params) {
  std::vector<NamedParam<Scalar>> out;
  visit(params, [&](const std::string& name, Matrix<Scalar>& m) { out.push_back({name, &m}); });
  return out;
}

template <typename Scalar>
std::vector<ConstNamedParam<Scalar>> parameter_list(const ModelParams<Scalar>& params) {
  std::vector<ConstNamedParam<Scalar>> out;
  visit(params, [&](const std::string& name, const Matrix<Scalar>& m) { out.push_back({name, &m}); });
  return out;
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<Scalar> p = shaped<Scalar>(cfg);
  std::mt19937_64 rng(seed);
  visit(p, [&](const std::string& name, Matrix<Scalar>& m) {
    if (name == "embedding" || ends_with(name, ".weight")) {
      const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    }
  });
  return p;
}

template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& cfg) {
  cfg.validate();
  return shaped<Scalar>(cfg);
}

template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& like) {
  ModelParams<Scalar> z = like;
  visit(z, [](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  return z;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.causal.resize(params.causal.size());
  out.generation.resize(params.generation.size());
  // Same block counts means the destination visit order matches the source.
  auto src = parameter_list(params);
  std::size_t i = 0;
  visit(out, [&](const std::string&, Matrix<To>& m) { m = src[i++].value->template cast<To>(); });
  return out;
}

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
  ModelParams<float> empty;
  empty.causal.resize(static_cast<std::size_t>(cfg.causal_layers()));
  if (cfg.arch == Arch::DoubleDecoder) {
    empty.generation.resize(static_cast<std::size_t>(cfg.generation_layers));
  }
  std::vector<std::string> names;
  visit(empty, [&](const std::string& name, Matrix<float>&) { names.push_back(name); });
  return names;
}

std::int64_t parameter_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d;
  const std::int64_t m = cfg.ffn_mult;
  const std::int64_t linear_dd = d * d + d;
  const std::int64_t ffn = (d * m * d + m * d) + (m * d * d + d);
  const std::int64_t norm = 2 * d;
  const std::int64_t causal_block = 2 * norm + 4 * linear_dd + ffn;
  const std::int64_t generation_block = 2 * norm + 6 * linear_dd + ffn;
  std::int64_t total = cfg.vocab_size * d + cfg.causal_layers() * causal_block + norm;
  if (cfg.arch == Arch::DoubleDecoder) total += cfg.generation_layers * generation_block + norm;
  return total;
}

std::int64_t non_embedding_matmul_params(const ModelConfig& cfg) {
  const std::int64_t d2 = cfg.d * cfg.d;
  const std::int64_t ffn = 2 * cfg.ffn_mult * d2;
  std::int64_t n = cfg.causal_layers() * (4 * d2 + ffn);
  if (cfg.arch == Arch::DoubleDecoder) n += cfg.generation_layers * (6 * d2 + ffn);
  return n;
}

template std::vector<NamedParam<float>> parameter_list(ModelParams<float>&);
template std::vector<NamedParam<double>> parameter_list(ModelParams<double>&);
template std::vector<ConstNamedParam<float>> parameter_list(const ModelParams<float>&);
template std::vector<ConstNamedParam<double>> parameter_list(const ModelParams<double>&);
template ModelParams<float> init_params(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params(const ModelConfig&, std::uint64_t);
template ModelParams<float> zero_params(const ModelConfig&);
template ModelParams<double> zero_params(const ModelConfig&);
template ModelParams<float> zeros_like(const ModelParams<float>&);
template ModelParams<double> zeros_like(const ModelParams<double>&);
template ModelParams<float> cast_params(const ModelParams<double>&);
template ModelParams<double> cast_params(const ModelParams<float>&);
template ModelParams<float> cast_params(const ModelParams<float>&);
template ModelParams<double> cast_params(const ModelParams<double>&);

}  // namespace ddec
