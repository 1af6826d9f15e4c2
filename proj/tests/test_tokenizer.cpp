#include <doctest.h>

#include <random>

#include "prrg/data.hpp"
#include "prrg/tokenizer.hpp"

using namespace prrg;

TEST_CASE("normalize_report fixtures") {
  CHECK(normalize_report("The HEART is NORMAL.") == "the heart is normal");
  CHECK(normalize_report("") == "");
  CHECK(normalize_report("a  b\tc!!") == "a b c");
  CHECK(normalize_report("  x-ray: 2 views ") == "x ray 2 views");
}

TEST_CASE("bpe: first merge is the most frequent pair") {
  // 5 specials + base {a, b} = 7; one more slot for the first merge
  const Vocabulary v = Vocabulary::train({"aaab", "aaab"}, 8);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == Vocabulary::Merge{"a", "a"});
}

TEST_CASE("bpe: ties go to the lexicographically smallest pair") {
  // "ab" and "cd" each occur twice
  const Vocabulary v = Vocabulary::train({"cd ab", "ab cd"}, 100);
  REQUIRE(!v.merges().empty());
  CHECK(v.merges()[0].first == "a");
}

TEST_CASE("bpe: single-character corpus gives specials plus that character") {
  std::string warn;
  const Vocabulary v = Vocabulary::train({"z"}, 50, &warn);
  CHECK(v.size() == special::kCount + 1);
  CHECK(v.find("z").has_value());
  CHECK(!warn.empty());
}

TEST_CASE("bpe: training is a pure function") {
  const std::vector<std::string> corpus = {"the heart is normal", "there is a small effusion", "no acute process"};
  const Vocabulary a = Vocabulary::train(corpus, 60), b = Vocabulary::train(corpus, 60);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.fingerprint() == b.fingerprint());
}

TEST_CASE("bpe: specials sit at the lowest ids and never appear in merges") {
  const Vocabulary v = Vocabulary::train({"the heart is normal", "the lungs are clear"}, 80);
  CHECK(v.token(special::kPad) == "<pad>");
  CHECK(v.token(special::kBos) == "<bos>");
  CHECK(v.token(special::kEos) == "<eos>");
  CHECK(v.token(special::kUnk) == "<unk>");
  CHECK(v.token(special::kSep) == "<sep>");
  for (const auto& [l, r] : v.merges()) {
    for (std::size_t s = 0; s < special::kCount; ++s) {
      CHECK(l != v.token(static_cast<TokenId>(s)));
      CHECK(r != v.token(static_cast<TokenId>(s)));
      CHECK(l + r != v.token(static_cast<TokenId>(s)));
    }
  }
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(*v.find(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
}

TEST_CASE("encode/decode fixtures") {
  const Vocabulary v = Vocabulary::train({"pleural effusion", "no finding"}, 200);
  CHECK(decode(encode("pleural effusion", v), v) == "pleural effusion");
  std::vector<TokenId> ids{special::kBos};
  for (auto id : v.encode_ids("no finding")) ids.push_back(id);
  ids.push_back(special::kEos);
  CHECK(decode(ids, v) == "no finding");
  const TokenSequence s = encode("pleural effusion", v);
  CHECK(s.ids.front() == special::kBos);
  CHECK(s.ids.back() == special::kEos);
  CHECK(s.count(Role::Report) == s.size());
}

TEST_CASE("encode substitutes UNK for characters outside the base alphabet") {
  // "q" never occurs in the training corpus; normalization keeps it.
  const Vocabulary v = Vocabulary::train({"the heart"}, 50);
  const TokenSequence s = encode("the quiet heart", v);
  CHECK(std::find(s.ids.begin(), s.ids.end(), special::kUnk) != s.ids.end());
  // non-ASCII input is removed by normalization before encoding
  CHECK(normalize_report("stra\xc3\x9f" "e") == "stra e");
}

TEST_CASE("decode ignores PAD and stops at EOS") {
  const Vocabulary v = Vocabulary::train({"a b"}, 30);
  const std::vector<TokenId> ids{special::kBos, *v.find("a"), special::kPad, special::kEos, *v.find(" b")};
  CHECK(decode(ids, v) == "a");
}

TEST_CASE("vocabulary file roundtrip") {
  const Vocabulary v = Vocabulary::train({"the heart is normal", "small effusion"}, 60);
  const Vocabulary w = Vocabulary::parse(v.serialize());
  CHECK(v == w);
  CHECK(w.serialize() == v.serialize());
  CHECK_THROWS(Vocabulary::parse("garbage"));
}

TEST_CASE("max length truncation keeps EOS last") {
  const Vocabulary v = Vocabulary::train({"one two three four five six"}, 100);
  const TokenSequence s = encode("one two three four five six", v, 4);
  CHECK(s.size() == 4);
  CHECK(s.ids.back() == special::kEos);
  const TokenSequence t = encode_truncated("one two. three four five six.", v, 5);
  CHECK(decode(t, v) == "one two");
}

TEST_CASE("roundtrip over 1000 grammar reports") {
  const Dataset d = generate_dataset(99, {1000, 1, 1});
  std::vector<std::string> corpus;
  for (const auto& s : d.train) corpus.push_back(normalize_report(s.report));
  const Vocabulary v = Vocabulary::train(corpus, 300);
  for (const auto& s : d.train) CHECK(decode(encode(s.report, v), v) == normalize_report(s.report));
}
