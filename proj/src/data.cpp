#include "ddec/data.hpp"

#include <fstream>
#include <sstream>

namespace ddec {

Tokens ByteTokenizer::encode(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (const char c : text) out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
  return out;
}

std::string ByteTokenizer::decode(const Tokens& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (const TokenId id : tokens) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::vector<std::string> load_documents(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(Errc::FileNotFound, "corpus '" + path.string() + "' does not exist");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open corpus '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return split_documents(buffer.str());
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const bool blank = line.find_first_not_of(" \t") == std::string_view::npos;
    if (blank) {
      if (!current.empty()) docs.push_back(std::move(current));
      current.clear();
    } else {
      if (!current.empty()) current.push_back('\n');
      current.append(line);
    }
    pos = end + 1;
  }
  if (!current.empty()) docs.push_back(std::move(current));
  return docs;
}

namespace {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// splitmix64 finalizer; FNV-1a alone barely moves the high bits when only the
// trailing bytes differ.
std::uint64_t mix(std::uint64_t h) {
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

}  // namespace

CorpusSplit split_holdout(std::vector<std::string> documents, double holdout_fraction) {
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw Error(Errc::InvalidConfig, "holdout_fraction must lie in [0, 1)");
  }
  const double threshold = holdout_fraction * 18446744073709551616.0;  // 2^64
  CorpusSplit split;
  for (auto& doc : documents) {
    const auto key = std::string_view(doc).substr(0, 32);
    if (static_cast<double>(mix(fnv1a(key))) < threshold) {
      split.holdout.push_back(std::move(doc));
    } else {
      split.train.push_back(std::move(doc));
    }
  }
  return split;
}

std::vector<Tokens> pack_sequences(const std::vector<std::string>& documents, Index seq_len) {
  if (seq_len < 2) throw Error(Errc::InvalidConfig, "seq_len must be at least 2");
  std::vector<Tokens> sequences;
  Tokens current;
  current.reserve(static_cast<std::size_t>(seq_len));
  auto push = [&](TokenId id) {
    current.push_back(id);
    if (static_cast<Index>(current.size()) == seq_len) {
      sequences.push_back(std::move(current));
      current = Tokens();
      current.reserve(static_cast<std::size_t>(seq_len));
    }
  };
  for (const auto& doc : documents) {
    for (const char c : doc) push(static_cast<TokenId>(static_cast<unsigned char>(c)));
    push(ByteTokenizer::kEos);
  }
  return sequences;
}

}  // namespace ddec
