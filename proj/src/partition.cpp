#include "ddec/partition.hpp"

#include <algorithm>
#include <charconv>
#include <iterator>

namespace ddec {

BlockPartition BlockPartition::validate(std::vector<Index> cuts, Index seq_len) {
  if (cuts.size() < 2) {
    throw Error(Errc::Empty, "a partition needs at least two cut indices");
  }
  if (cuts.front() != 0 || cuts.back() != seq_len) {
    throw Error(Errc::BadEndpoints, "cuts must start at 0 and end at " + std::to_string(seq_len));
  }
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    if (cuts[i] >= cuts[i + 1]) {
      throw Error(Errc::NonMonotonic, "cut " + std::to_string(i + 1) + " does not increase");
    }
  }
  return BlockPartition(std::move(cuts));
}

BlockPartition BlockPartition::single(Index seq_len) { return validate({0, seq_len}, seq_len); }

BlockPartition BlockPartition::parse(std::string_view text) {
  std::vector<Index> cuts;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto field = text.substr(0, comma);
    long long value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size()) {
      throw Error(Errc::BadFormat, "bad cut index '" + std::string(field) + "'");
    }
    cuts.push_back(static_cast<Index>(value));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  if (cuts.empty()) throw Error(Errc::Empty, "empty partition");
  const Index seq_len = cuts.back();
  return validate(std::move(cuts), seq_len);
}

Index BlockPartition::block_of(Index t) const {
  if (t < 0 || t >= seq_len()) {
    throw Error(Errc::OutOfRange, "position " + std::to_string(t) + " outside [0, " +
                                      std::to_string(seq_len()) + ")");
  }
  const auto it = std::upper_bound(cuts_.begin(), cuts_.end(), t);
  return static_cast<Index>(std::distance(cuts_.begin(), it)) - 1;
}

std::string BlockPartition::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < cuts_.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(cuts_[i]);
  }
  return out;
}

void check_feasible(Index seq_len, const PartitionBounds& bounds) {
  if (bounds.min_blocks < 1 || bounds.min_block_len < 1 || bounds.max_blocks < bounds.min_blocks) {
    throw Error(Errc::Infeasible, "need 1 <= min_blocks <= max_blocks and min_block_len >= 1");
  }
  if (bounds.max_blocks * bounds.min_block_len > seq_len) {
    throw Error(Errc::Infeasible, std::to_string(bounds.max_blocks) + " blocks of length >= " +
                                      std::to_string(bounds.min_block_len) + " do not fit in " +
                                      std::to_string(seq_len) + " tokens");
  }
}

BlockPartition sample_partition(std::mt19937_64& rng, Index seq_len,
                                const PartitionBounds& bounds) {
  check_feasible(seq_len, bounds);

  std::uniform_int_distribution<Index> count_dist(bounds.min_blocks, bounds.max_blocks);
  const Index blocks = count_dist(rng);

  // Stars and bars: block lengths are min_block_len + e_k with sum(e_k) = slack.
  // Each layout corresponds to one choice of blocks-1 bar slots out of
  // slack + blocks - 1, so a uniform subset gives a uniform layout.
  const Index slack = seq_len - blocks * bounds.min_block_len;
  const Index slots = slack + blocks - 1;
  std::vector<Index> population(static_cast<std::size_t>(slots));
  for (Index i = 0; i < slots; ++i) population[static_cast<std::size_t>(i)] = i;
  std::vector<Index> bars;
  bars.reserve(static_cast<std::size_t>(blocks - 1));
  std::sample(population.begin(), population.end(), std::back_inserter(bars), blocks - 1, rng);

  std::vector<Index> cuts;
  cuts.reserve(static_cast<std::size_t>(blocks + 1));
  cuts.push_back(0);
  for (Index i = 0; i < blocks - 1; ++i) {
    cuts.push_back((i + 1) * bounds.min_block_len + bars[static_cast<std::size_t>(i)] - i);
  }
  cuts.push_back(seq_len);
  return BlockPartition::validate(std::move(cuts), seq_len);
}

}  // namespace ddec
