#include <random>

#include "cmc/decode.hpp"
#include "cmc/error.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cmc;

namespace {

const char* kCorpus =
    "Q: where does the cow live? A: on the farm END\n"
    "Q: what does the dog say? A: woof END\n"
    "Q: what is 2 plus 3? A: 5 END\n";

struct Pair {
  Tokenizer user_tok = build_vocab(kCorpus, TokenizerScheme::merge, 60);
  Tokenizer delta_tok = build_vocab(kCorpus, TokenizerScheme::character, 200);
  TinyTransformer user = init_model(ModelConfig{user_tok.vocab().size(), 64, 16, 1, 2, 32, 1});
  TinyTransformer delta = init_model(ModelConfig{delta_tok.vocab().size(), 64, 16, 1, 2, 32, 2});
  TokenMapping map = build_mapping(user_tok.vocab(), delta_tok.vocab(), MapStrategy::pm_mined);
};

const Pair& models() {
  static const Pair p;
  return p;
}

CompositionSpec cmc_spec(double alpha) {
  CompositionSpec s;
  s.alpha = alpha;
  s.mapping = models().map;
  return s;
}

CompositionSpec none_spec() {
  CompositionSpec s;
  s.mode = ComposeMode::none;
  return s;
}

std::string random_prompt(std::mt19937_64& rng) {
  return "Q: " + oracle::random_word(rng, "abcdefghilmnorstuvwy ", 2, 16) + "? ";
}

}  // namespace

TEST_CASE("generation spec validation") {
  GenerationSpec g;
  g.max_new_tokens = 0;
  CHECK_THROWS_AS(g.validate(), Error);
  g.max_new_tokens = 1;
  g.mode = DecodeMode::sample;
  g.temperature = 0.0;
  CHECK_THROWS_AS(g.validate(), Error);
  g.temperature = 0.5;
  CHECK_NOTHROW(g.validate());
}

TEST_CASE("argmax breaks ties toward the lowest id") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(argmax(std::vector<double>{0}) == 0);
  GenerationSpec g;
  g.mode = DecodeMode::sample;
  g.top_k = 1;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) CHECK(select_token(std::vector<double>{0.1, 2.0, 1.9}, g, rng) == 1);
}

TEST_CASE("sampling follows the softmax") {
  GenerationSpec g;
  g.mode = DecodeMode::sample;
  std::mt19937_64 rng(2);
  const std::vector<double> logits{std::log(0.2), std::log(0.8)};
  int ones = 0;
  for (int i = 0; i < 4000; ++i) ones += select_token(logits, g, rng) == 1;
  CHECK(ones / 4000.0 == doctest::Approx(0.8).epsilon(0.05));
  g.top_k = 1;
  for (int i = 0; i < 50; ++i) CHECK(select_token(logits, g, rng) == 1);
}

TEST_CASE("session construction checks") {
  const auto& m = models();
  CHECK_THROWS_AS(SteeredSession(m.user, m.user_tok, cmc_spec(1.0)), Error);
  CompositionSpec proxy = cmc_spec(1.0);
  proxy.mode = ComposeMode::proxy;
  CHECK_THROWS_AS(SteeredSession(m.user, m.user_tok, proxy, &m.delta, &m.delta_tok), Error);
  CompositionSpec no_map;
  CHECK_THROWS_AS(SteeredSession(m.user, m.user_tok, no_map, &m.delta, &m.delta_tok), Error);
  auto wrong = cmc_spec(1.0);
  wrong.mapping->user_tag = "other";
  CHECK_THROWS_AS(SteeredSession(m.user, m.user_tok, wrong, &m.delta, &m.delta_tok), Error);
  CHECK_NOTHROW(SteeredSession(m.user, m.user_tok, none_spec()));
}

TEST_CASE("alpha zero and mode none pick the unsteered id") {
  const auto& m = models();
  SteeredSession steered(m.user, m.user_tok, cmc_spec(0.0), &m.delta, &m.delta_tok);
  SteeredSession plain(m.user, m.user_tok, none_spec());
  std::mt19937_64 rng(3);
  GenerationSpec g;
  for (int i = 0; i < 10; ++i) {
    const auto p = random_prompt(rng);
    steered.start(p);
    plain.start(p);
    const auto a = steered.step(g, rng);
    const auto b = plain.step(g, rng);
    CHECK(a.id == b.id);
    CHECK(a.id == a.unsteered_id);
    CHECK(b.id == b.unsteered_id);
  }
}

TEST_CASE("shared tokenizer with identity mapping reduces to training composition") {
  const auto& m = models();
  auto spec = cmc_spec(1.0);
  spec.mapping = TokenMapping::identity(m.delta_tok.vocab());
  const auto user = init_model(ModelConfig{m.delta_tok.vocab().size(), 64, 16, 1, 2, 32, 7});
  SteeredSession s(user, m.delta_tok, spec, &m.delta, &m.delta_tok);
  s.start("Q: what does the cow say? ");
  s.push(*m.delta_tok.vocab().find("A"));
  const auto got = s.logits();
  const auto ids = s.user_ids();
  CHECK(s.delta_ids() == ids);
  const auto zu = forward<float>(user, std::span<const TokenId>(ids));
  const auto zd = forward<float>(m.delta, std::span<const TokenId>(ids));
  CHECK(got == compose_train(zu.row(zu.rows - 1), zd.row(zd.rows - 1)));
}

TEST_CASE("delta stream is the re-encoded text") {
  const auto& m = models();
  SteeredSession s(m.user, m.user_tok, cmc_spec(1.0), &m.delta, &m.delta_tok);
  s.set_incremental(true);
  const auto r = generate(s, "Q: where does the dog live? ", GenerationSpec{});
  auto expect = std::vector<TokenId>{Vocabulary::kBos};
  const auto p = m.delta_tok.encode_ids("Q: where does the dog live? ");
  const auto c = m.delta_tok.encode_ids(r.continuation);
  expect.insert(expect.end(), p.begin(), p.end());
  expect.insert(expect.end(), c.begin(), c.end());
  CHECK(s.delta_ids() == expect);
  CHECK(s.delta_ids_for(s.prompt(), s.continuation()) == expect);
}

TEST_CASE("incremental encoder equals full re-encode") {
  std::mt19937_64 rng(4);
  const Tokenizer tok(oracle::random_vocab(rng, 40, "abc", 4), TokenizerScheme::merge);
  for (int trial = 0; trial < 100; ++trial) {
    IncrementalEncoder enc(tok);
    std::string text;
    for (int step = 0; step < 15; ++step) {
      const auto piece = oracle::random_word(rng, "abcd", 0, 3);
      enc.append(piece);
      text += piece;
      CHECK(enc.ids() == tok.encode_ids(text));
      CHECK(enc.text() == text);
    }
    enc.reset();
    CHECK(enc.ids().empty());
  }
}

TEST_CASE("generation basics") {
  const auto& m = models();
  SteeredSession s(m.user, m.user_tok, cmc_spec(1.0), &m.delta, &m.delta_tok);
  GenerationSpec one;
  one.max_new_tokens = 1;
  const auto r = generate(s, "Q: hi ", one);
  CHECK(r.steps == 1);
  CHECK(r.ids.size() <= 1);

  GenerationSpec g;
  g.max_new_tokens = 12;
  const auto a = generate(s, "Q: what is 2 plus 3? ", g);
  const auto b = generate(s, "Q: what is 2 plus 3? ", g);
  CHECK(a.continuation == b.continuation);
  CHECK(a.ids == b.ids);
  CHECK(a.continuation == m.user_tok.decode_ids(a.ids));
}

TEST_CASE("sampling is seeded") {
  const auto& m = models();
  // zero output layer: the user model is uniform over its vocabulary
  const auto flat = init_model(ModelConfig{m.user_tok.vocab().size(), 64, 16, 1, 2, 32, 1}, true);
  SteeredSession s(flat, m.user_tok, none_spec());
  GenerationSpec g;
  g.mode = DecodeMode::sample;
  g.max_new_tokens = 8;
  int differ = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    g.seed = seed;
    const auto a = generate(s, "Q: ", g);
    const auto b = generate(s, "Q: ", g);
    CHECK(a.ids == b.ids);
    g.seed = seed + 1000;
    const auto c = generate(s, "Q: ", g);
    differ += c.ids != a.ids;
  }
  CHECK(differ >= 18);
}

TEST_CASE("stop string ends generation") {
  const auto& m = models();
  const auto flat = init_model(ModelConfig{m.user_tok.vocab().size(), 64, 16, 1, 2, 32, 1}, true);
  SteeredSession s(flat, m.user_tok, none_spec());
  GenerationSpec g;
  g.mode = DecodeMode::sample;
  g.max_new_tokens = 40;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    g.seed = seed;
    g.stop.reset();
    const auto full = generate(s, "Q: ", g);
    if (full.continuation.size() < 2) continue;
    g.stop = full.continuation.substr(0, 2);
    const auto cut = generate(s, "Q: ", g);
    CHECK(cut.continuation.find(*g.stop) != std::string::npos);
    CHECK(cut.continuation.size() <= full.continuation.size());
    CHECK(full.continuation.starts_with(cut.continuation));
  }
}

TEST_CASE("alpha zero generation equals unsteered generation") {
  const auto& m = models();
  SteeredSession steered(m.user, m.user_tok, cmc_spec(0.0), &m.delta, &m.delta_tok);
  SteeredSession plain(m.user, m.user_tok, none_spec());
  std::mt19937_64 rng(5);
  GenerationSpec g;
  g.max_new_tokens = 10;
  for (int i = 0; i < 30; ++i) {
    const auto p = random_prompt(rng);
    const auto a = generate(steered, p, g);
    const auto b = generate(plain, p, g);
    CHECK(a.ids == b.ids);
    CHECK(a.agreement() == 1.0);
  }
}

TEST_CASE("fully unmapped steering changes nothing") {
  const auto& m = models();
  auto spec = cmc_spec(2.0);
  std::fill(spec.mapping->entries.begin(), spec.mapping->entries.end(), kUnmapped);
  SteeredSession steered(m.user, m.user_tok, spec, &m.delta, &m.delta_tok);
  SteeredSession plain(m.user, m.user_tok, none_spec());
  std::mt19937_64 rng(6);
  GenerationSpec g;
  g.max_new_tokens = 10;
  for (int i = 0; i < 20; ++i) {
    const auto p = random_prompt(rng);
    CHECK(generate(steered, p, g).ids == generate(plain, p, g).ids);
  }
}

TEST_CASE("context overflow names the side") {
  const auto& m = models();
  const auto short_delta = init_model(ModelConfig{m.delta_tok.vocab().size(), 8, 16, 1, 2, 32, 2});
  SteeredSession s(m.user, m.user_tok, cmc_spec(1.0), &short_delta, &m.delta_tok);
  s.start("Q: where does the cow live? ");
  try {
    s.logits();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("delta side") != std::string::npos);
  }
  const auto short_user = init_model(ModelConfig{m.user_tok.vocab().size(), 4, 16, 1, 2, 32, 1});
  SteeredSession u(short_user, m.user_tok, none_spec());
  u.start("Q: where does the cow live? ");
  try {
    u.logits();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("user side") != std::string::npos);
  }
}

TEST_CASE("generation stops when the context fills up") {
  const auto& m = models();
  const auto flat = init_model(ModelConfig{m.user_tok.vocab().size(), 12, 16, 1, 2, 32, 1}, true);
  SteeredSession s(flat, m.user_tok, none_spec());
  GenerationSpec g;
  g.mode = DecodeMode::sample;
  g.max_new_tokens = 50;
  const auto r = generate(s, "Q: ", g);
  if (!r.context_full) CHECK(r.steps < 50);
  CHECK(s.user_ids().size() <= 12 + 1);
}

TEST_CASE("proxy session across vocabularies") {
  const auto& m = models();
  const auto anti = init_model(ModelConfig{m.delta_tok.vocab().size(), 64, 16, 1, 2, 32, 9});
  auto spec = cmc_spec(1.0);
  spec.mode = ComposeMode::proxy;
  SteeredSession s(m.user, m.user_tok, spec, &m.delta, &m.delta_tok, &anti);
  s.start("Q: hi ");
  const auto got = s.logits();
  const auto uid = s.user_ids();
  const auto did = s.delta_ids();
  const auto zu = forward<float>(m.user, std::span<const TokenId>(uid));
  const auto ze = forward<float>(m.delta, std::span<const TokenId>(did));
  const auto za = forward<float>(anti, std::span<const TokenId>(did));
  CHECK(got == compose_proxy_mapped(zu.row(zu.rows - 1), ze.row(ze.rows - 1), za.row(za.rows - 1), 1.0, &m.map));
}
