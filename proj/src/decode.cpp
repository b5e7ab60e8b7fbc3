#include "cmc/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmc/error.hpp"
#include "cmc/utf8.hpp"

namespace cmc {

void GenerationSpec::validate() const {
  if (max_new_tokens < 1) fail_config("max_new_tokens must be at least 1");
  if (mode == DecodeMode::sample && !(temperature > 0.0)) fail_config("temperature must be > 0 when sampling");
}

IncrementalEncoder::IncrementalEncoder(const Tokenizer& tok) : tok_(&tok), window_(4) {
  for (const auto& t : tok.vocab().tokens()) window_ = std::max(window_, t.size());
}

void IncrementalEncoder::reset() {
  text_.clear();
  ids_.clear();
  starts_.clear();
}

void IncrementalEncoder::append(std::string_view text) {
  const std::size_t old_len = text_.size();
  text_.append(text);
  std::size_t keep = 0;
  while (keep < starts_.size() && starts_[keep] + window_ <= old_len) ++keep;
  std::size_t pos = keep < starts_.size() ? starts_[keep] : old_len;
  ids_.resize(keep);
  starts_.resize(keep);
  const auto& trie = tok_->vocab().trie();
  while (pos < text_.size()) {
    auto [id, len] = trie.longest_match(text_, pos);
    starts_.push_back(pos);
    if (id == ByteTrie::kNone) {
      ids_.push_back(Vocabulary::kUnk);
      pos += utf8::sequence_length(static_cast<unsigned char>(text_[pos]));
    } else {
      ids_.push_back(id);
      pos += len;
    }
  }
}

SteeredSession::SteeredSession(const TinyTransformer& user, const Tokenizer& user_tok, CompositionSpec spec,
                               const TinyTransformer* delta, const Tokenizer* delta_tok,
                               const TinyTransformer* anti_expert)
    : user_(&user), user_tok_(&user_tok), spec_(std::move(spec)), delta_(delta), delta_tok_(delta_tok),
      anti_(anti_expert) {
  if (user_tok.vocab().size() != user.config().vocab_size) fail_config("user tokenizer does not match user model");
  if (spec_.mode == ComposeMode::none) return;
  if (!delta_ || !delta_tok_) fail_config("composition mode " + std::string(to_string(spec_.mode)) + " needs a delta model");
  if (delta_tok_->vocab().size() != delta_->config().vocab_size) {
    fail_config("delta tokenizer does not match delta model");
  }
  if (spec_.mode == ComposeMode::proxy) {
    if (!anti_) fail_config("proxy mode needs an anti-expert model");
    if (anti_->config().vocab_size != delta_->config().vocab_size) {
      fail_config("expert and anti-expert must share a vocabulary");
    }
  }
  spec_.validate(user.config().vocab_size, delta_->config().vocab_size);
  if (spec_.mapping) {
    const auto& m = *spec_.mapping;
    if ((!m.user_tag.empty() && m.user_tag != user_tok.vocab().tag()) ||
        (!m.delta_tag.empty() && m.delta_tag != delta_tok_->vocab().tag())) {
      fail_config("token mapping was built for different vocabularies");
    }
  }
}

void SteeredSession::set_incremental(bool on) {
  if (on && delta_tok_) {
    cache_.emplace(*delta_tok_);
    cache_->append(continuation_);
  } else {
    cache_.reset();
  }
}

void SteeredSession::start(std::string_view prompt) {
  prompt_ = std::string(prompt);
  continuation_.clear();
  user_ids_.assign(1, Vocabulary::kBos);
  const auto p = user_tok_->encode_ids(prompt);
  user_ids_.insert(user_ids_.end(), p.begin(), p.end());
  delta_prompt_ids_.clear();
  if (delta_tok_ && steered()) {
    delta_prompt_ids_.push_back(Vocabulary::kBos);
    const auto d = delta_tok_->encode_ids(prompt);
    delta_prompt_ids_.insert(delta_prompt_ids_.end(), d.begin(), d.end());
  }
  if (cache_) cache_->reset();
}

void SteeredSession::push(TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= user_tok_->vocab().size()) fail("token id outside user vocabulary");
  user_ids_.push_back(id);
  if (Vocabulary::is_special(id)) return;
  const auto& piece = user_tok_->vocab().token(id);
  continuation_ += piece;
  if (cache_) cache_->append(piece);
}

std::vector<TokenId> SteeredSession::delta_ids() const {
  if (!delta_tok_ || !steered()) return {};
  std::vector<TokenId> ids = delta_prompt_ids_;
  const auto full = delta_tok_->encode_ids(continuation_);
  if (cache_ && cache_->ids() != full) fail("incremental delta encoding diverged from full re-encode");
  ids.insert(ids.end(), full.begin(), full.end());
  return ids;
}

std::vector<TokenId> SteeredSession::delta_ids_for(std::string_view prompt, std::string_view continuation) const {
  if (!delta_tok_ || !steered()) return {};
  std::vector<TokenId> ids(1, Vocabulary::kBos);
  const auto p = delta_tok_->encode_ids(prompt);
  const auto c = delta_tok_->encode_ids(continuation);
  ids.insert(ids.end(), p.begin(), p.end());
  ids.insert(ids.end(), c.begin(), c.end());
  return ids;
}

std::vector<TokenId> SteeredSession::user_ids_for(std::string_view prompt, std::span<const TokenId> continuation) const {
  std::vector<TokenId> ids(1, Vocabulary::kBos);
  const auto p = user_tok_->encode_ids(prompt);
  ids.insert(ids.end(), p.begin(), p.end());
  ids.insert(ids.end(), continuation.begin(), continuation.end());
  return ids;
}

std::vector<double> SteeredSession::logits_for(std::span<const TokenId> user_ids, std::span<const TokenId> delta_ids,
                                               TokenId* unsteered) const {
  if (user_ids.size() > user_->config().context_len) {
    fail("context exceeded on the user side (" + std::to_string(user_ids.size()) + " > " +
         std::to_string(user_->config().context_len) + ")");
  }
  const auto lu = forward<float>(*user_, user_ids);
  const auto zu = lu.row(lu.rows - 1);
  if (unsteered) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < zu.size(); ++i) {
      if (zu[i] > zu[best]) best = i;
    }
    *unsteered = static_cast<TokenId>(best);
  }
  if (!steered()) return compose_infer(zu, zu, spec_);
  if (delta_ids.size() > delta_->config().context_len) {
    fail("context exceeded on the delta side (" + std::to_string(delta_ids.size()) + " > " +
         std::to_string(delta_->config().context_len) + ")");
  }
  const auto ld = forward<float>(*delta_, delta_ids);
  const auto zd = ld.row(ld.rows - 1);
  if (spec_.mode == ComposeMode::cmc) return compose_infer(zu, zd, spec_);
  if (anti_->config().context_len < delta_ids.size()) fail("context exceeded on the anti-expert side");
  const auto la = forward<float>(*anti_, delta_ids);
  const TokenMapping* mapping = spec_.mapping ? &*spec_.mapping : nullptr;
  return compose_proxy_mapped(zu, zd, la.row(la.rows - 1), spec_.alpha, mapping);
}

std::vector<double> SteeredSession::logits() const {
  if (user_ids_.empty()) fail("session not started");
  return logits_for(user_ids_, delta_ids());
}

TokenId argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId select_token(std::span<const double> logits, const GenerationSpec& gen, std::mt19937_64& rng) {
  if (gen.mode == DecodeMode::greedy) return argmax(logits);
  std::vector<std::size_t> idx(logits.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (gen.top_k > 0 && gen.top_k < idx.size()) {
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(gen.top_k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    idx.resize(gen.top_k);
    std::sort(idx.begin(), idx.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i : idx) mx = std::max(mx, logits[i] / gen.temperature);
  std::vector<double> w(idx.size());
  double total = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    w[k] = std::exp(logits[idx[k]] / gen.temperature - mx);
    total += w[k];
  }
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double acc = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    acc += w[k];
    if (u < acc) return static_cast<TokenId>(idx[k]);
  }
  return static_cast<TokenId>(idx.back());
}

bool SteeredSession::fits() const {
  if (user_ids_.size() > user_->config().context_len) return false;
  if (!steered()) return true;
  const std::size_t n = delta_ids().size();
  return n <= delta_->config().context_len && (!anti_ || n <= anti_->config().context_len);
}

StepResult SteeredSession::step(const GenerationSpec& gen, std::mt19937_64& rng) const {
  StepResult r;
  if (user_ids_.empty()) fail("session not started");
  r.logits = logits_for(user_ids_, delta_ids(), &r.unsteered_id);
  r.id = select_token(r.logits, gen, rng);
  return r;
}

GenerationResult generate(SteeredSession& sess, std::string_view prompt, const GenerationSpec& gen) {
  gen.validate();
  sess.start(prompt);
  std::mt19937_64 rng(gen.seed);
  GenerationResult out;
  for (std::size_t n = 0; n < gen.max_new_tokens; ++n) {
    if (n > 0 && !sess.fits()) {
      out.context_full = true;
      break;
    }
    const StepResult r = sess.step(gen, rng);
    ++out.steps;
    if (r.id == r.unsteered_id) ++out.agreements;
    if (r.id == Vocabulary::kEos) break;
    out.ids.push_back(r.id);
    sess.push(r.id);
    if (gen.stop) {
      const auto at = sess.continuation().find(*gen.stop);
      if (at != std::string::npos) break;
    }
  }
  out.continuation = sess.continuation();
  return out;
}

}  // namespace cmc
