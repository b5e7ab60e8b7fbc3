#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmc/trie.hpp"

namespace cmc {

using TokenId = std::int32_t;

// Ordered set of distinct token strings. The four special tokens always
// occupy ids 0..3 in the order <bos>, <eos>, <pad>, <unk>.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumSpecials = 4;

  // `content` excludes the specials; they are prepended automatically.
  static Vocabulary from_content(const std::vector<std::string>& content);

  // Full token list including the four specials at the front.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::optional<TokenId> find(std::string_view token) const;
  static bool is_special(TokenId id) noexcept { return id >= 0 && id < kNumSpecials; }

  // Stable identifier derived from the token list.
  const std::string& tag() const noexcept { return tag_; }

  const ByteTrie& trie() const noexcept { return trie_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> id_of_;
  ByteTrie trie_;  // content tokens only
  std::string tag_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::string vocab_tag;
};

enum class TokenizerScheme { character, merge };

std::string_view to_string(TokenizerScheme scheme);
TokenizerScheme parse_scheme(std::string_view name);

using MergeRule = std::pair<std::string, std::string>;

class Tokenizer {
 public:
  Tokenizer(Vocabulary vocab, TokenizerScheme scheme, std::vector<MergeRule> merges = {});

  const Vocabulary& vocab() const noexcept { return vocab_; }
  TokenizerScheme scheme() const noexcept { return scheme_; }
  const std::vector<MergeRule>& merges() const noexcept { return merges_; }

  // Greedy longest match over the vocabulary; an uncovered code point
  // becomes a single <unk>.
  TokenSequence encode(std::string_view text) const;
  std::vector<TokenId> encode_ids(std::string_view text) const;

  // Concatenates token strings with specials dropped.
  std::string decode(const TokenSequence& seq) const;
  std::string decode_ids(const std::vector<TokenId>& ids) const;

  // Writes `<stem>.vocab` and, for the merge scheme, `<stem>.merges`.
  void save(const std::filesystem::path& stem) const;
  static Tokenizer load(const std::filesystem::path& stem);

 private:
  Vocabulary vocab_;
  TokenizerScheme scheme_;
  std::vector<MergeRule> merges_;
};

// Learns a tokenizer from `corpus`. Newlines separate records and never
// become part of a token. The result has at most `target_size` tokens.
Tokenizer build_vocab(std::string_view corpus, TokenizerScheme scheme, std::size_t target_size);

}  // namespace cmc
