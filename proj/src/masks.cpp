#include "ddec/masks.hpp"

#include <algorithm>
#include <sstream>

namespace ddec {

BoolMatrix causal_mask(Index seq_len) {
  BoolMatrix mask(seq_len, seq_len);
  for (Index t = 0; t < seq_len; ++t) {
    for (Index s = 0; s < seq_len; ++s) mask(t, s) = s <= t;
  }
  return mask;
}

AttentionMaskPair block_masks(const BlockPartition& partition) {
  const Index T = partition.seq_len();
  AttentionMaskPair masks{BoolMatrix::Constant(T, T, false), BoolMatrix::Constant(T, T, false)};
  for (Index k = 0; k < partition.block_count(); ++k) {
    const Index begin = partition.block_begin(k);
    const Index end = partition.block_end(k);
    for (Index t = begin; t < end; ++t) {
      for (Index s = 0; s < begin; ++s) masks.cross_mask(t, s) = true;
      for (Index s = begin; s <= t; ++s) masks.self_mask(t, s) = true;
    }
  }
  return masks;
}

AttentionMaskPair prefix_lm_mask(Index breakpoint, Index seq_len) {
  if (breakpoint <= 0 || breakpoint >= seq_len) {
    throw Error(Errc::BadBreakpoint, "breakpoint " + std::to_string(breakpoint) +
                                         " outside (0, " + std::to_string(seq_len) + ")");
  }
  return block_masks(BlockPartition::validate({0, breakpoint, seq_len}, seq_len));
}

BlockMaskPredicate::BlockMaskPredicate(const BlockPartition& partition)
    : block_(static_cast<std::size_t>(partition.seq_len())) {
  for (Index k = 0; k < partition.block_count(); ++k) {
    std::fill(block_.begin() + partition.block_begin(k), block_.begin() + partition.block_end(k), k);
  }
}

std::string render_masks(const AttentionMaskPair& masks, const std::vector<std::string>& labels) {
  const Index T = masks.self_mask.rows();
  std::size_t width = 1;
  for (const auto& l : labels) width = std::max(width, l.size());
  auto label = [&](Index i) {
    std::string l = static_cast<std::size_t>(i) < labels.size() ? labels[static_cast<std::size_t>(i)]
                                                                : std::to_string(i);
    return std::string(width > l.size() ? width - l.size() : 0, ' ') + l;
  };
  if (labels.empty()) width = std::to_string(std::max<Index>(T - 1, 0)).size();

  std::ostringstream out;
  out << std::string(width, ' ');
  for (Index s = 0; s < T; ++s) out << ' ' << label(s);
  out << '\n';
  for (Index t = 0; t < T; ++t) {
    out << label(t);
    for (Index s = 0; s < T; ++s) {
      const char c = masks.self_mask(t, s) ? 'S' : masks.cross_mask(t, s) ? 'X' : '.';
      out << ' ' << std::string(width - 1, ' ') << c;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace ddec
