#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "cmc/error.hpp"
#include "cmc/model.hpp"
#include "doctest.h"
#include "golden.hpp"
#include "oracles.hpp"

using namespace cmc;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) { return ModelConfig{9, 8, 8, 2, 2, 16, seed}; }

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng() % vocab);
  return ids;
}

template <typename S>
std::vector<S> random_values(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<S> v(n);
  for (auto& x : v) x = static_cast<S>(u(rng));
  return v;
}

std::string message_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("init is deterministic") {
  const auto a = init_model(small_config(3));
  const auto b = init_model(small_config(3));
  REQUIRE(a.params().size() == b.params().size());
  CHECK(std::memcmp(a.params().data(), b.params().data(), a.params().size_bytes()) == 0);
  const auto c = init_model(small_config(4));
  CHECK(std::memcmp(a.params().data(), c.params().data(), a.params().size_bytes()) != 0);
}

TEST_CASE("init rejects bad configs") {
  ModelConfig cfg{10, 8, 8, 1, 3, 16, 0};
  CHECK(message_of([&] { init_model(cfg); }) == "d_model not divisible by n_heads");
  cfg = ModelConfig{10, 1, 8, 1, 2, 16, 0};
  CHECK_THROWS_AS(init_model(cfg), Error);
  cfg = ModelConfig{10, 8, 8, 0, 2, 16, 0};
  CHECK_THROWS_AS(init_model(cfg), Error);
}

TEST_CASE("parameter shapes follow the config") {
  const auto m = init_model(ModelConfig{10, 8, 4, 1, 2, 8, 0});
  CHECK(m.layout().find("tok_emb").shape == std::vector<std::size_t>{10, 4});
  CHECK(m.layout().find("pos_emb").shape == std::vector<std::size_t>{8, 4});
  CHECK(m.layout().find("out.weight").shape == std::vector<std::size_t>{4, 10});
  CHECK(m.layout().total == parameter_count(m.config()));
  for (float g : m.tensor("lnf.gain")) CHECK(g == 1.0f);
  for (float b : m.tensor("layer0.attn.b_qkv")) CHECK(b == 0.0f);
  const float bound = 1.0f / std::sqrt(4.0f);
  for (float w : m.tensor("layer0.attn.w_qkv")) CHECK(std::abs(w) <= bound);
}

TEST_CASE("forward is causal") {
  std::mt19937_64 rng(2);
  const auto m = init_model(small_config());
  for (int trial = 0; trial < 20; ++trial) {
    auto ids = random_ids(rng, 8, 9);
    const auto base = forward<float>(m, std::span<const TokenId>(ids));
    const std::size_t k = rng() % 8;
    for (std::size_t i = k; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(rng() % 9);
    const auto changed = forward<float>(m, std::span<const TokenId>(ids));
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < 9; ++c) CHECK(base.row(r)[c] == changed.row(r)[c]);
    }
  }
}

TEST_CASE("zero output projection gives zero logits") {
  const auto m = init_model(small_config(), true);
  const std::vector<TokenId> ids{0, 4, 5, 6};
  const auto out = forward<float>(m, std::span<const TokenId>(ids));
  CHECK(out.rows == 4);
  CHECK(out.cols == 9);
  for (float v : out.values) CHECK(v == 0.0f);
}

TEST_CASE("forward rejects overlong and out-of-range input") {
  const auto m = init_model(small_config());
  const std::vector<TokenId> ids(9, 4);
  CHECK(message_of([&] { forward<float>(m, std::span<const TokenId>(ids)); }).starts_with("context exceeded"));
  const std::vector<TokenId> bad{0, 9};
  CHECK_THROWS_AS(forward<float>(m, std::span<const TokenId>(bad)), Error);
}

TEST_CASE("golden logits") {
  const auto m = init_model(golden::config());
  const auto ids = golden::sequence();
  const auto out = forward<float>(m, std::span<const TokenId>(ids));
  std::ifstream in(std::filesystem::path(CMC_FIXTURE_DIR) / "golden_logits.txt");
  REQUIRE(in);
  std::size_t rows = 0, cols = 0;
  in >> rows >> cols;
  REQUIRE(rows == out.rows);
  REQUIRE(cols == out.cols);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    double expect = 0;
    in >> expect;
    CHECK(out.values[i] == doctest::Approx(expect).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("forward and backward are bit reproducible") {
  std::mt19937_64 rng(4);
  const auto m = init_model(small_config());
  const auto ids = random_ids(rng, 7, 9);
  const auto d = random_values<float>(rng, 7 * 9);
  const auto a = forward<float>(m, std::span<const TokenId>(ids));
  const auto b = forward<float>(m, std::span<const TokenId>(ids));
  CHECK(a.values == b.values);
  const auto ga = backward<float>(m, std::span<const TokenId>(ids), std::span<const float>(d));
  const auto gb = backward<float>(m, std::span<const TokenId>(ids), std::span<const float>(d));
  CHECK(ga == gb);
}

TEST_CASE("backward edge cases") {
  std::mt19937_64 rng(5);
  auto m = init_model(small_config());
  const auto ids = random_ids(rng, 6, 9);
  const std::vector<float> zero(6 * 9, 0.0f);
  for (float g : backward<float>(m, std::span<const TokenId>(ids), std::span<const float>(zero))) CHECK(g == 0.0f);

  // dLogits supported on token 2 only: output weight columns of other tokens stay zero
  std::vector<float> d(6 * 9, 0.0f);
  for (std::size_t r = 0; r < 6; ++r) d[r * 9 + 2] = 1.0f;
  const auto g = backward<float>(m, std::span<const TokenId>(ids), std::span<const float>(d));
  const auto& w = m.layout().find("out.weight");
  const auto& b = m.layout().find("out.bias");
  for (std::size_t k = 0; k < 8; ++k) {
    for (std::size_t v = 0; v < 9; ++v) {
      if (v != 2) CHECK(g[w.offset + k * 9 + v] == 0.0f);
    }
  }
  CHECK(g[b.offset + 2] == doctest::Approx(6.0));
  CHECK(g[b.offset + 3] == 0.0f);

  m.set_frozen(true);
  CHECK(message_of([&] { backward<float>(m, std::span<const TokenId>(ids), std::span<const float>(d)); }) ==
        "model is frozen");
}

TEST_CASE("analytic gradients match finite differences") {
  std::mt19937_64 rng(6);
  const ModelConfig cfg{8, 6, 8, 2, 2, 12, 9};
  REQUIRE(parameter_count(cfg) <= 5000);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = init_model<double>(ModelConfig{cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.n_layers, cfg.n_heads,
                                            cfg.d_ff, cfg.seed + static_cast<std::uint64_t>(trial)});
    const std::size_t t = 2 + rng() % 5;
    const auto ids = random_ids(rng, t, cfg.vocab_size);
    const auto d = random_values<double>(rng, t * cfg.vocab_size);
    const auto r = oracle::finite_difference_check(m, ids, d);
    CHECK(r.checked == parameter_count(cfg));
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  std::mt19937_64 rng(7);
  const auto m = init_model(small_config(8));
  const auto path = std::filesystem::temp_directory_path() / "cmc_test_model.ckpt";
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  CHECK(back.config() == m.config());
  CHECK(std::memcmp(back.params().data(), m.params().data(), m.params().size_bytes()) == 0);
  const auto ids = random_ids(rng, 8, 9);
  const auto a = forward<float>(m, std::span<const TokenId>(ids));
  const auto b = forward<float>(back, std::span<const TokenId>(ids));
  CHECK(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint loader rejects wrong magic and version") {
  const auto m = init_model(small_config());
  const auto path = std::filesystem::temp_directory_path() / "cmc_test_bad.ckpt";
  save_checkpoint(m, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary);
    out << b;
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  CHECK(message_of([&] { load_checkpoint(path); }).find("wrong magic") != std::string::npos);
  auto bad_version = bytes;
  bad_version[4] = 9;
  write(bad_version);
  CHECK(message_of([&] { load_checkpoint(path); }).find("unsupported format version") != std::string::npos);
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}

TEST_CASE("float and double models agree") {
  std::mt19937_64 rng(8);
  const auto m = init_model(small_config());
  const auto md = m.cast<double>();
  const auto ids = random_ids(rng, 8, 9);
  const auto a = forward<float>(m, std::span<const TokenId>(ids));
  const auto b = forward<double>(md, std::span<const TokenId>(ids));
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-4));
}
