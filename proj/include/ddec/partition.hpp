#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddec/common.hpp"

namespace ddec {

/// Cut indices 0 = b_0 < b_1 < ... < b_K = T splitting a sequence of T tokens
/// into K contiguous blocks. Block k covers positions [b_k, b_{k+1}).
class BlockPartition {
 public:
  /// Throws Errc::Empty, Errc::BadEndpoints or Errc::NonMonotonic.
  static BlockPartition validate(std::vector<Index> cuts, Index seq_len);

  /// The degenerate partition (0, T).
  static BlockPartition single(Index seq_len);

  /// Parses the comma-separated form written by to_string().
  static BlockPartition parse(std::string_view text);

  Index seq_len() const noexcept { return cuts_.back(); }
  Index block_count() const noexcept { return static_cast<Index>(cuts_.size()) - 1; }
  std::span<const Index> cuts() const noexcept { return cuts_; }

  Index block_begin(Index k) const { return cuts_.at(static_cast<std::size_t>(k)); }
  Index block_end(Index k) const { return cuts_.at(static_cast<std::size_t>(k) + 1); }

  /// The unique k with cuts[k] <= t < cuts[k+1]; Errc::OutOfRange otherwise.
  Index block_of(Index t) const;

  std::string to_string() const;

  friend bool operator==(const BlockPartition&, const BlockPartition&) = default;

 private:
  explicit BlockPartition(std::vector<Index> cuts) : cuts_(std::move(cuts)) {}

  std::vector<Index> cuts_;
};

struct PartitionBounds {
  Index min_blocks = 2;
  Index max_blocks = 32;
  Index min_block_len = 8;
};

/// Throws Errc::Infeasible when the bounds cannot be met for seq_len.
void check_feasible(Index seq_len, const PartitionBounds& bounds);

/// Draws the block count uniformly from [min_blocks, max_blocks], then a cut
/// layout uniformly among all layouts with that count whose blocks are at
/// least min_block_len long.
BlockPartition sample_partition(std::mt19937_64& rng, Index seq_len,
                                const PartitionBounds& bounds);

}  // namespace ddec
