#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cmc/compose.hpp"
#include "cmc/model.hpp"
#include "cmc/vocab.hpp"

namespace cmc {

enum class DecodeMode { greedy, sample };

struct GenerationSpec {
  std::size_t max_new_tokens = 32;
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0 keeps the whole vocabulary
  std::uint64_t seed = 0;
  std::optional<std::string> stop;

  void validate() const;
};

// Greedy longest-match encoding of a growing text. Tokens whose match
// window lies entirely inside the already-seen text cannot change when
// text is appended, so only the tail is re-encoded.
class IncrementalEncoder {
 public:
  explicit IncrementalEncoder(const Tokenizer& tok);

  void reset();
  void append(std::string_view text);
  const std::vector<TokenId>& ids() const noexcept { return ids_; }
  const std::string& text() const noexcept { return text_; }

 private:
  const Tokenizer* tok_;
  std::size_t window_;
  std::string text_;
  std::vector<TokenId> ids_;
  std::vector<std::size_t> starts_;
};

struct StepResult {
  TokenId id = 0;
  std::vector<double> logits;  // composed, over the user vocabulary
  TokenId unsteered_id = 0;    // greedy choice of the user model alone
};

// A user model decoding under the influence of a delta model that may use
// a different tokenizer. The user side consumes BOS + prompt ids + its own
// emitted ids; the delta side consumes BOS + the delta tokenizer's encoding
// of the prompt and of the decoded continuation.
class SteeredSession {
 public:
  SteeredSession(const TinyTransformer& user, const Tokenizer& user_tok, CompositionSpec spec,
                 const TinyTransformer* delta = nullptr, const Tokenizer* delta_tok = nullptr,
                 const TinyTransformer* anti_expert = nullptr);

  void start(std::string_view prompt);
  void push(TokenId id);

  std::vector<double> logits() const;
  // Whether both streams still fit their context windows.
  bool fits() const;
  StepResult step(const GenerationSpec& gen, std::mt19937_64& rng) const;

  const std::vector<TokenId>& user_ids() const noexcept { return user_ids_; }
  std::vector<TokenId> delta_ids() const;
  // Delta-side stream for an arbitrary prompt and continuation.
  std::vector<TokenId> delta_ids_for(std::string_view prompt, std::string_view continuation) const;
  std::vector<TokenId> user_ids_for(std::string_view prompt, std::span<const TokenId> continuation) const;
  const std::string& continuation() const noexcept { return continuation_; }
  const std::string& prompt() const noexcept { return prompt_; }

  // Keeps the delta-side encoding of the continuation incrementally and
  // checks it against a full re-encode on every step.
  void set_incremental(bool on);

  const CompositionSpec& spec() const noexcept { return spec_; }
  const Tokenizer& user_tokenizer() const noexcept { return *user_tok_; }
  bool steered() const noexcept { return spec_.mode != ComposeMode::none; }

  // Composed logits for an explicit pair of streams, last position only.
  // `unsteered`, when given, receives the user model's own greedy choice.
  std::vector<double> logits_for(std::span<const TokenId> user_ids, std::span<const TokenId> delta_ids,
                                 TokenId* unsteered = nullptr) const;

 private:
  const TinyTransformer* user_;
  const Tokenizer* user_tok_;
  CompositionSpec spec_;
  const TinyTransformer* delta_;
  const Tokenizer* delta_tok_;
  const TinyTransformer* anti_;
  std::string prompt_;
  std::string continuation_;
  std::vector<TokenId> user_ids_;
  std::vector<TokenId> delta_prompt_ids_;
  std::optional<IncrementalEncoder> cache_;
};

TokenId argmax(std::span<const double> v);
TokenId select_token(std::span<const double> logits, const GenerationSpec& gen, std::mt19937_64& rng);

struct GenerationResult {
  std::string continuation;
  std::vector<TokenId> ids;
  std::size_t steps = 0;
  std::size_t agreements = 0;  // steps whose choice equals the unsteered greedy choice
  bool context_full = false;   // stopped because a side ran out of context

  double agreement() const { return steps ? static_cast<double>(agreements) / static_cast<double>(steps) : 1.0; }
};

GenerationResult generate(SteeredSession& sess, std::string_view prompt, const GenerationSpec& gen);

}  // namespace cmc
