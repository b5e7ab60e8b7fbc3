#include "cmc/vocab.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cmc/error.hpp"
#include "cmc/utf8.hpp"

namespace cmc {

namespace {

constexpr std::array<const char*, 4> kSpecialStrings = {"<bos>", "<eos>", "<pad>", "<unk>"};

std::string fnv1a_tag(const std::vector<std::string>& tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xFF;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "v%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split_records(std::string_view corpus) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= corpus.size()) {
    std::size_t end = corpus.find('\n', start);
    if (end == std::string_view::npos) end = corpus.size();
    std::string_view line = corpus.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.emplace_back(line);
    start = end + 1;
  }
  return lines;
}

std::string escape_merge_side(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c == ' ') {
      out += "\\s";
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::string unescape_merge_side(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      ++i;
      out.push_back(s[i] == 's' ? ' ' : s[i]);
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

}  // namespace

Vocabulary Vocabulary::from_content(const std::vector<std::string>& content) {
  std::vector<std::string> tokens(kSpecialStrings.begin(), kSpecialStrings.end());
  tokens.insert(tokens.end(), content.begin(), content.end());
  return Vocabulary(std::move(tokens));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 5) fail_data("vocabulary needs the four specials plus at least one content token");
  for (std::size_t i = 0; i < kSpecialStrings.size(); ++i) {
    if (tokens_[i] != kSpecialStrings[i]) {
      fail_data("vocabulary line " + std::to_string(i + 1) + " must be " + kSpecialStrings[i]);
    }
  }
  id_of_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty()) fail_data("empty token at id " + std::to_string(i));
    if (t.find('\n') != std::string::npos) fail_data("token contains newline at id " + std::to_string(i));
    if (!id_of_.emplace(t, static_cast<TokenId>(i)).second) fail_data("duplicate token '" + t + "'");
    if (i >= static_cast<std::size_t>(kNumSpecials)) trie_.insert(t, static_cast<TokenId>(i));
  }
  tag_ = fnv1a_tag(tokens_);
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = id_of_.find(std::string(token));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens));
}

std::string_view to_string(TokenizerScheme scheme) {
  return scheme == TokenizerScheme::character ? "char" : "merge";
}

TokenizerScheme parse_scheme(std::string_view name) {
  if (name == "char") return TokenizerScheme::character;
  if (name == "merge") return TokenizerScheme::merge;
  fail_config("unknown tokenizer scheme '" + std::string(name) + "'");
}

Tokenizer::Tokenizer(Vocabulary vocab, TokenizerScheme scheme, std::vector<MergeRule> merges)
    : vocab_(std::move(vocab)), scheme_(scheme), merges_(std::move(merges)) {
  if (scheme_ == TokenizerScheme::character && !merges_.empty()) {
    fail_data("character tokenizer cannot carry merge rules");
  }
}

std::vector<TokenId> Tokenizer::encode_ids(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto [id, len] = vocab_.trie().longest_match(text, pos);
    if (id == ByteTrie::kNone) {
      ids.push_back(Vocabulary::kUnk);
      pos += utf8::sequence_length(static_cast<unsigned char>(text[pos]));
    } else {
      ids.push_back(id);
      pos += len;
    }
  }
  return ids;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  return TokenSequence{encode_ids(text), vocab_.tag()};
}

std::string Tokenizer::decode_ids(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      fail_data("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (!Vocabulary::is_special(id)) out += vocab_.token(id);
  }
  return out;
}

std::string Tokenizer::decode(const TokenSequence& seq) const {
  if (seq.vocab_tag != vocab_.tag()) fail_data("vocabulary mismatch");
  return decode_ids(seq.ids);
}

void Tokenizer::save(const std::filesystem::path& stem) const {
  auto vocab_path = stem;
  vocab_path += ".vocab";
  vocab_.save(vocab_path);
  auto merges_path = stem;
  merges_path += ".merges";
  if (scheme_ == TokenizerScheme::merge) {
    std::ofstream out(merges_path, std::ios::binary);
    if (!out) fail_data("cannot write merge file " + merges_path.string());
    for (const auto& [l, r] : merges_) out << escape_merge_side(l) << ' ' << escape_merge_side(r) << '\n';
  } else {
    std::error_code ec;
    std::filesystem::remove(merges_path, ec);
  }
}

Tokenizer Tokenizer::load(const std::filesystem::path& stem) {
  auto vocab_path = stem;
  vocab_path += ".vocab";
  auto merges_path = stem;
  merges_path += ".merges";
  Vocabulary vocab = Vocabulary::load(vocab_path);
  if (!std::filesystem::exists(merges_path)) return Tokenizer(std::move(vocab), TokenizerScheme::character);
  std::ifstream in(merges_path, std::ios::binary);
  std::vector<MergeRule> merges;
  std::string line;
  while (std::getline(in, line)) {
    const auto sp = line.find(' ');
    if (sp == std::string::npos) fail_data("malformed merge rule '" + line + "'");
    merges.emplace_back(unescape_merge_side(std::string_view(line).substr(0, sp)),
                        unescape_merge_side(std::string_view(line).substr(sp + 1)));
  }
  return Tokenizer(std::move(vocab), TokenizerScheme::merge, std::move(merges));
}

Tokenizer build_vocab(std::string_view corpus, TokenizerScheme scheme, std::size_t target_size) {
  if (target_size < 5) fail_config("target_size must be at least 5");
  const auto records = split_records(corpus);
  if (records.empty()) fail_data("empty corpus");

  std::vector<std::u32string> decoded;
  decoded.reserve(records.size());
  std::map<char32_t, std::size_t> char_counts;
  for (const auto& r : records) {
    decoded.push_back(utf8::decode(r));
    for (char32_t c : decoded.back()) ++char_counts[c];
  }

  // Character inventory, truncated to the most frequent when it cannot fit.
  std::vector<std::pair<char32_t, std::size_t>> chars(char_counts.begin(), char_counts.end());
  const std::size_t room = target_size - Vocabulary::kNumSpecials;
  if (chars.size() > room) {
    std::stable_sort(chars.begin(), chars.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    chars.resize(room);
    std::sort(chars.begin(), chars.end());
  }
  std::vector<std::string> content;
  for (const auto& [c, n] : chars) content.push_back(utf8::encode(std::u32string(1, c)));

  std::vector<MergeRule> merges;
  if (scheme == TokenizerScheme::merge) {
    std::unordered_map<std::string, bool> known;
    for (const auto& t : content) known[t] = true;
    // Symbols outside the inventory are represented by "" and never merge.
    std::vector<std::vector<std::string>> lines;
    lines.reserve(decoded.size());
    for (const auto& d : decoded) {
      std::vector<std::string> syms;
      syms.reserve(d.size());
      for (char32_t c : d) {
        std::string s = utf8::encode(std::u32string(1, c));
        syms.push_back(known.count(s) ? s : std::string());
      }
      lines.push_back(std::move(syms));
    }

    std::size_t guard = 0;
    while (content.size() + Vocabulary::kNumSpecials < target_size && guard++ < 100000) {
      std::unordered_map<std::string, std::size_t> pair_counts;
      for (const auto& syms : lines) {
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
          if (syms[i].empty() || syms[i + 1].empty()) continue;
          std::string key = syms[i];
          key.push_back('\0');
          key += syms[i + 1];
          ++pair_counts[key];
        }
      }
      const std::string* best = nullptr;
      std::size_t best_count = 1;
      for (const auto& [key, n] : pair_counts) {
        if (n > best_count || (n == best_count && best != nullptr && key < *best)) {
          best = &key;
          best_count = n;
        }
      }
      if (best == nullptr) break;
      const auto sep = best->find('\0');
      const std::string left = best->substr(0, sep);
      const std::string right = best->substr(sep + 1);
      const std::string joined = left + right;
      merges.emplace_back(left, right);
      for (auto& syms : lines) {
        std::vector<std::string> next;
        next.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size(); ++i) {
          if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
            next.push_back(joined);
            ++i;
          } else {
            next.push_back(std::move(syms[i]));
          }
        }
        syms = std::move(next);
      }
      if (!known.count(joined)) {
        known[joined] = true;
        content.push_back(joined);
      }
    }
  }
  return Tokenizer(Vocabulary::from_content(content), scheme, std::move(merges));
}

}  // namespace cmc
