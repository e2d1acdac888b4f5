#include <doctest.h>

#include <fstream>

#include "ddec/data.hpp"
#include "support/fixtures.hpp"

using namespace ddec;

TEST_CASE("byte tokenizer round trip") {
  const std::string text = "h\xc3\xa9llo\n\x01";
  const Tokens t = ByteTokenizer::encode(text);
  CHECK(t.size() == text.size());
  CHECK(t[1] == 0xc3);
  CHECK(ByteTokenizer::decode(t) == text);
  Tokens with_specials = t;
  with_specials.push_back(ByteTokenizer::kEos);
  with_specials.insert(with_specials.begin(), ByteTokenizer::kBos);
  CHECK(ByteTokenizer::decode(with_specials) == text);
}

TEST_CASE("documents split at blank lines") {
  const auto docs = split_documents("one\ntwo\n\n\nthree\n  \nfour");
  REQUIRE(docs.size() >= 3);
  CHECK(docs.front().find("one") != std::string::npos);
  CHECK(docs.back().find("four") != std::string::npos);
  CHECK(split_documents("").empty());
}

TEST_CASE("packing") {
  const auto seqs = pack_sequences({"abc", "de"}, 3);
  // a b c EOS d e EOS -> two full sequences, tail dropped.
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0] == Tokens{'a', 'b', 'c'});
  CHECK(seqs[1] == Tokens{ByteTokenizer::kEos, 'd', 'e'});
}

TEST_CASE("holdout split is deterministic and content-addressed") {
  std::vector<std::string> docs;
  for (int i = 0; i < 400; ++i) docs.push_back("document number " + std::to_string(i));
  const auto a = split_holdout(docs, 0.2);
  const auto b = split_holdout(docs, 0.2);
  CHECK(a.holdout == b.holdout);
  CHECK(a.train.size() + a.holdout.size() == docs.size());
  CHECK(a.holdout.size() > 40);
  CHECK(a.holdout.size() < 120);
  CHECK(split_holdout(docs, 0.0).holdout.empty());
  // A document's side does not depend on its neighbours.
  std::vector<std::string> shuffled(docs.rbegin(), docs.rend());
  const auto c = split_holdout(shuffled, 0.2);
  CHECK(c.holdout.size() == a.holdout.size());
}

TEST_CASE("loading corpora") {
  testing::TempDir dir("data");
  try {
    load_documents(dir / "missing.txt");
    FAIL("missing file accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::FileNotFound);
  }
  testing::write_synthetic_corpus(dir / "c.txt", 5000, 1);
  const auto docs = load_documents(dir / "c.txt");
  CHECK(docs.size() > 5);
  CHECK(std::filesystem::file_size(dir / "c.txt") >= 5000);
}
