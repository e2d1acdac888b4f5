#include "fixtures.hpp"

#include <array>
#include <fstream>
#include <stdexcept>

namespace ddec::testing {

ModelConfig tiny_config(Arch arch, Index d, Index head_dim) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.d = d;
  cfg.head_dim = head_dim;
  cfg.layers = 3;
  cfg.context_layers = 2;
  cfg.generation_layers = 1;
  cfg.base_width = 8;
  cfg.max_seq_len = 64;
  return cfg;
}

Tokens random_tokens(std::mt19937_64& rng, Index n, Index vocab) {
  std::uniform_int_distribution<TokenId> dist(0, static_cast<TokenId>(vocab - 1));
  Tokens out(static_cast<std::size_t>(n));
  for (auto& t : out) t = dist(rng);
  return out;
}

BlockPartition random_cuts(std::mt19937_64& rng, Index seq_len) {
  std::bernoulli_distribution keep(0.5);
  std::vector<Index> cuts{0};
  for (Index t = 1; t < seq_len; ++t) {
    if (keep(rng)) cuts.push_back(t);
  }
  cuts.push_back(seq_len);
  return BlockPartition::validate(std::move(cuts), seq_len);
}

std::vector<BlockPartition> all_partitions(Index seq_len) {
  std::vector<BlockPartition> out;
  const std::uint64_t n = 1ull << (seq_len - 1);
  for (std::uint64_t bits = 0; bits < n; ++bits) {
    std::vector<Index> cuts{0};
    for (Index t = 1; t < seq_len; ++t) {
      if (bits >> (t - 1) & 1u) cuts.push_back(t);
    }
    cuts.push_back(seq_len);
    out.push_back(BlockPartition::validate(std::move(cuts), seq_len));
  }
  return out;
}

void write_synthetic_corpus(const std::filesystem::path& path, std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array subjects{"the cat", "a small dog", "the old farmer", "my sister", "the river",
                                       "a red bird", "the teacher", "our neighbor", "the wind", "a tired horse"};
  static constexpr std::array verbs{"sees", "follows", "carries", "finds", "watches",
                                    "likes", "calls", "visits", "paints", "remembers"};
  static constexpr std::array objects{"the green field", "a wooden box", "the quiet town", "an open door",
                                      "the long road", "a warm loaf of bread", "the morning light",
                                      "a bright lantern", "the stone bridge", "a letter from home"};
  static constexpr std::array tails{"before dinner", "every morning", "near the hill", "in the rain",
                                    "after school", "without a word", "at the market", "by the lake"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const auto& list) { return list[std::uniform_int_distribution<std::size_t>(0, list.size() - 1)(rng)]; };
  std::uniform_int_distribution<int> sentences(3, 9);
  std::bernoulli_distribution with_tail(0.6);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  std::size_t written = 0;
  while (written < bytes) {
    std::string doc;
    const int n = sentences(rng);
    for (int i = 0; i < n; ++i) {
      std::string s = std::string(pick(subjects)) + " " + pick(verbs) + " " + pick(objects);
      if (with_tail(rng)) s += std::string(" ") + pick(tails);
      s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
      doc += s + (i + 1 < n ? ". " : ".\n");
    }
    doc += "\n";
    out << doc;
    written += doc.size();
  }
}

TempDir::TempDir(const std::string& tag) {
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() / ("ddec-" + tag + "-" + std::to_string(rd()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace ddec::testing
