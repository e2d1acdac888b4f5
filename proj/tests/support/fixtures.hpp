#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ddec/config.hpp"
#include "ddec/partition.hpp"

namespace ddec::testing {

ModelConfig tiny_config(Arch arch, Index d = 16, Index head_dim = 8);

Tokens random_tokens(std::mt19937_64& rng, Index n, Index vocab = 259);

/// Any subset of interior cut points, each kept with probability 1/2. Shares
/// no code with sample_partition.
BlockPartition random_cuts(std::mt19937_64& rng, Index seq_len);

/// Every partition of a sequence of seq_len tokens (2^(T-1) of them).
std::vector<BlockPartition> all_partitions(Index seq_len);

/// Writes English-like text built from a small fixed lexicon, documents
/// separated by blank lines, until at least `bytes` bytes are written.
void write_synthetic_corpus(const std::filesystem::path& path, std::size_t bytes, std::uint64_t seed);

/// Fresh directory under the system temp dir, removed by the destructor.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace ddec::testing
