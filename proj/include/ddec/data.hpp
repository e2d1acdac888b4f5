#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ddec/common.hpp"

namespace ddec {

/// Byte-level vocabulary: ids 0..255 are raw bytes, then three specials.
struct ByteTokenizer {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr Index kVocabSize = 259;

  static Tokens encode(std::string_view text);
  /// Drops special tokens.
  static std::string decode(const Tokens& tokens);
};

/// Reads a UTF-8 text file and splits it into documents at blank lines.
/// Throws Errc::FileNotFound or Errc::Io.
std::vector<std::string> load_documents(const std::filesystem::path& path);

std::vector<std::string> split_documents(std::string_view text);

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> holdout;
};

/// A document goes to the holdout side when the hash of its first 32 bytes
/// (FNV-1a, then the splitmix64 finalizer) falls below holdout_fraction of the
/// hash range.
CorpusSplit split_holdout(std::vector<std::string> documents, double holdout_fraction);

/// Concatenates byte-encoded documents, each terminated by EOS, and cuts the
/// stream into non-overlapping sequences of seq_len tokens. The tail that
/// does not fill a sequence is dropped.
std::vector<Tokens> pack_sequences(const std::vector<std::string>& documents, Index seq_len);

}  // namespace ddec
