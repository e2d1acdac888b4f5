#pragma once

#include <string>

#include "ddec/common.hpp"
#include "ddec/partition.hpp"

namespace ddec {

/// Generation-decoder masks. self_mask holds causal within-block pairs,
/// cross_mask holds every pair whose key lies in a strictly earlier block.
struct AttentionMaskPair {
  BoolMatrix self_mask;
  BoolMatrix cross_mask;
};

BoolMatrix causal_mask(Index seq_len);

AttentionMaskPair block_masks(const BlockPartition& partition);

/// Same masks as block_masks over the partition (0, breakpoint, seq_len).
/// Throws Errc::BadBreakpoint unless 0 < breakpoint < seq_len.
AttentionMaskPair prefix_lm_mask(Index breakpoint, Index seq_len);

/// On-the-fly form of the causal mask; callable as mask(t, s).
struct CausalPredicate {
  Index offset = 0;  // absolute position of query row 0
  bool operator()(Index t, Index s) const noexcept { return s <= t + offset; }
};

/// On-the-fly form of block_masks, resolved through a per-position block table.
class BlockMaskPredicate {
 public:
  explicit BlockMaskPredicate(const BlockPartition& partition);

  bool self(Index t, Index s) const noexcept { return s <= t && block_[t] == block_[s]; }
  bool cross(Index t, Index s) const noexcept { return block_[s] < block_[t]; }

  struct SelfView {
    const BlockMaskPredicate* parent;
    bool operator()(Index t, Index s) const noexcept { return parent->self(t, s); }
  };
  struct CrossView {
    const BlockMaskPredicate* parent;
    bool operator()(Index t, Index s) const noexcept { return parent->cross(t, s); }
  };
  SelfView self_view() const noexcept { return {this}; }
  CrossView cross_view() const noexcept { return {this}; }

 private:
  std::vector<Index> block_;
};

/// ASCII grid with queries as rows and keys as columns: 'S' self, 'X' cross,
/// '.' hidden. Optional labels (one per position) head the rows and columns.
std::string render_masks(const AttentionMaskPair& masks, const std::vector<std::string>& labels = {});

}  // namespace ddec
