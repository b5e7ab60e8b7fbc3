#include <filesystem>
#include <fstream>
#include <random>

#include "cmc/error.hpp"
#include "cmc/vocab.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cmc;

namespace {

std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / (std::string("cmc_test_") + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

TokenId id_of(const Tokenizer& t, const char* s) { return *t.vocab().find(s); }

}  // namespace

TEST_CASE("char scheme keeps the character inventory") {
  const auto t = build_vocab("abab", TokenizerScheme::character, 100);
  CHECK(t.vocab().size() == 6);
  CHECK(t.vocab().find("a"));
  CHECK(t.vocab().find("b"));
  CHECK(t.merges().empty());
}

TEST_CASE("merge scheme learns the most frequent pair first") {
  const auto t = build_vocab("abab", TokenizerScheme::merge, 7);
  CHECK(t.vocab().size() == 7);
  CHECK(t.vocab().find("ab"));
  REQUIRE(t.merges().size() == 1);
  CHECK(t.merges()[0] == MergeRule{"a", "b"});
}

TEST_CASE("empty corpus is rejected") {
  for (auto scheme : {TokenizerScheme::character, TokenizerScheme::merge}) {
    try {
      build_vocab("", scheme, 10);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()) == "empty corpus");
    }
  }
}

TEST_CASE("target size below five is rejected") { CHECK_THROWS_AS(build_vocab("ab", TokenizerScheme::merge, 4), Error); }

TEST_CASE("vocabulary size never exceeds the target") {
  const std::string corpus = "the cat sat on the mat\nthe dog sat on the log\n";
  for (std::size_t target : {20, 25, 30, 40}) {
    CHECK(build_vocab(corpus, TokenizerScheme::merge, target).vocab().size() <= target);
  }
}

TEST_CASE("encode examples") {
  const auto c = build_vocab("ab", TokenizerScheme::character, 10);
  CHECK(c.encode_ids("ab") == std::vector<TokenId>{id_of(c, "a"), id_of(c, "b")});
  CHECK(c.encode_ids("\xC2\xA4") == std::vector<TokenId>{Vocabulary::kUnk});

  const Tokenizer m(Vocabulary::from_content({"a", "b", "ab"}), TokenizerScheme::merge, {{"a", "b"}});
  CHECK(m.encode_ids("aba") == std::vector<TokenId>{id_of(m, "ab"), id_of(m, "a")});
}

TEST_CASE("decode drops specials and checks the vocabulary tag") {
  const auto t = build_vocab("ab", TokenizerScheme::character, 10);
  CHECK(t.decode_ids({id_of(t, "a"), id_of(t, "b")}) == "ab");
  CHECK(t.decode_ids({Vocabulary::kBos, id_of(t, "a"), Vocabulary::kEos}) == "a");

  const auto other = build_vocab("xyz", TokenizerScheme::character, 10);
  auto seq = other.encode("x");
  try {
    t.decode(seq);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "vocabulary mismatch");
  }
}

TEST_CASE("vocabulary invariants") {
  const auto t = build_vocab("hello world\nhold the door\n", TokenizerScheme::merge, 30);
  const auto& v = t.vocab();
  CHECK(v.size() >= 5);
  CHECK(v.token(Vocabulary::kBos) == "<bos>");
  CHECK(v.token(Vocabulary::kEos) == "<eos>");
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(*v.find(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
    CHECK(!v.token(static_cast<TokenId>(i)).empty());
  }
}

TEST_CASE("duplicate tokens are rejected") {
  CHECK_THROWS_AS(Vocabulary::from_content({"a", "a"}), Error);
}

TEST_CASE("round trip and determinism on corpus-drawn strings") {
  std::mt19937_64 rng(3);
  std::string corpus;
  for (int i = 0; i < 200; ++i) corpus += oracle::random_word(rng, "abcde fgh", 1, 12) + "\n";
  for (auto scheme : {TokenizerScheme::character, TokenizerScheme::merge}) {
    const auto t = build_vocab(corpus, scheme, 60);
    for (int i = 0; i < 200; ++i) {
      // random substrings of the corpus, newlines excluded
      const std::size_t a = rng() % corpus.size();
      const std::size_t len = rng() % 20;
      std::string s = corpus.substr(a, len);
      std::erase(s, '\n');
      const auto ids = t.encode_ids(s);
      CHECK(t.decode_ids(ids) == s);
      CHECK(t.encode_ids(s) == ids);
      for (TokenId id : ids) CHECK(static_cast<std::size_t>(id) < t.vocab().size());
    }
  }
}

TEST_CASE("greedy longest match against a brute force scan") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = oracle::random_vocab(rng, 30, "abc", 4);
    std::vector<std::string> content(v.tokens().begin() + Vocabulary::kNumSpecials, v.tokens().end());
    const Tokenizer t(v, TokenizerScheme::merge);
    const auto s = oracle::random_word(rng, "abcd", 1, 30);
    std::vector<TokenId> expect;
    for (std::size_t pos = 0; pos < s.size();) {
      std::size_t best_len = 0;
      TokenId best = Vocabulary::kUnk;
      for (std::size_t i = Vocabulary::kNumSpecials; i < v.size(); ++i) {
        const auto& tok = v.tokens()[i];
        if (tok.size() > best_len && s.compare(pos, tok.size(), tok) == 0) {
          best_len = tok.size();
          best = static_cast<TokenId>(i);
        }
      }
      expect.push_back(best);
      pos += best_len ? best_len : 1;
    }
    CHECK(t.encode_ids(s) == expect);
  }
}

TEST_CASE("different schemes give different vocabularies") {
  const std::string corpus = "where does the cow live\nwhat does the dog say\n";
  const auto a = build_vocab(corpus, TokenizerScheme::character, 200);
  const auto b = build_vocab(corpus, TokenizerScheme::merge, 60);
  CHECK(a.vocab().tokens() != b.vocab().tokens());
  CHECK(a.vocab().tag() != b.vocab().tag());
}

TEST_CASE("tokenizer files round trip") {
  const auto dir = temp_dir("vocab");
  const auto t = build_vocab("the cat sat on the mat\n", TokenizerScheme::merge, 20);
  t.save(dir / "tok");
  CHECK(std::filesystem::exists(dir / "tok.vocab"));
  CHECK(std::filesystem::exists(dir / "tok.merges"));
  const auto u = Tokenizer::load(dir / "tok");
  CHECK(u.vocab().tokens() == t.vocab().tokens());
  CHECK(u.merges() == t.merges());
  CHECK(u.scheme() == TokenizerScheme::merge);
  CHECK(u.encode_ids("the mat") == t.encode_ids("the mat"));
}

TEST_CASE("vocabulary file rejects missing specials") {
  const auto dir = temp_dir("badvocab");
  {
    std::ofstream out(dir / "bad.vocab");
    out << "<bos>\n<eos>\na\nb\n";
  }
  CHECK_THROWS_AS(Vocabulary::load(dir / "bad.vocab"), Error);
}
