#include "cmc/tokenmap.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "cmc/error.hpp"
#include "cmc/utf8.hpp"

namespace cmc {

std::string_view to_string(MapStrategy s) {
  switch (s) {
    case MapStrategy::exact: return "exact";
    case MapStrategy::mined: return "mined";
    case MapStrategy::pm_mined: return "pm-mined";
  }
  return "?";
}

MapStrategy parse_strategy(std::string_view name) {
  if (name == "exact") return MapStrategy::exact;
  if (name == "mined") return MapStrategy::mined;
  if (name == "pm-mined" || name == "pm_mined") return MapStrategy::pm_mined;
  fail_config("unknown mapping strategy '" + std::string(name) + "'");
}

std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      const std::size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      row[j] = std::min({up + 1, row[j - 1] + 1, sub});
      diag = up;
    }
  }
  return row[b.size()];
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  return edit_distance(std::u32string_view(utf8::decode(a)), std::u32string_view(utf8::decode(b)));
}

std::vector<TokenId> prefix_candidates(std::string_view tok, const Vocabulary& delta) {
  std::vector<TokenId> out;
  delta.trie().collect_prefixes(tok, out);
  delta.trie().collect_extensions(tok, out);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

struct Candidate {
  TokenId id = kUnmapped;
  std::size_t distance = 0;
  std::size_t length = 0;
};

// Smaller distance, then longer string, then lexicographically smaller.
bool better(const Candidate& c, const Candidate& best, const Vocabulary& v) {
  if (best.id == kUnmapped) return true;
  if (c.distance != best.distance) return c.distance < best.distance;
  if (c.length != best.length) return c.length > best.length;
  return v.token(c.id) < v.token(best.id);
}

TokenId argmin_over(const std::u32string& tok, const Vocabulary& delta,
                    const std::vector<TokenId>& ids) {
  Candidate best;
  for (TokenId id : ids) {
    const auto cand = utf8::decode(delta.token(id));
    // |len difference| bounds the distance from below.
    const std::size_t gap = cand.size() > tok.size() ? cand.size() - tok.size() : tok.size() - cand.size();
    if (best.id != kUnmapped && gap > best.distance) continue;
    Candidate c{id, edit_distance(tok, cand), cand.size()};
    if (better(c, best, delta)) best = c;
  }
  return best.id;
}

}  // namespace

TokenId match_token(std::string_view tok, const Vocabulary& delta, MapStrategy strategy) {
  if (tok.empty()) fail_data("cannot match an empty token");
  if (auto exact = delta.find(tok); exact && !Vocabulary::is_special(*exact)) return *exact;
  switch (strategy) {
    case MapStrategy::exact:
      return kUnmapped;
    case MapStrategy::mined: {
      std::vector<TokenId> all;
      all.reserve(delta.size());
      for (TokenId id = Vocabulary::kNumSpecials; id < static_cast<TokenId>(delta.size()); ++id) all.push_back(id);
      return argmin_over(utf8::decode(tok), delta, all);
    }
    case MapStrategy::pm_mined: {
      const auto cands = prefix_candidates(tok, delta);
      if (cands.empty()) return kUnmapped;
      return argmin_over(utf8::decode(tok), delta, cands);
    }
  }
  return kUnmapped;
}

TokenMapping build_mapping(const Vocabulary& user, const Vocabulary& delta, MapStrategy strategy) {
  TokenMapping m;
  m.strategy = strategy;
  m.delta_size = delta.size();
  m.user_tag = user.tag();
  m.delta_tag = delta.tag();
  m.entries.assign(user.size(), kUnmapped);
  const auto n = static_cast<std::int64_t>(user.size());

#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = static_cast<TokenId>(i);
    m.entries[static_cast<std::size_t>(i)] =
        Vocabulary::is_special(id) ? id : match_token(user.token(id), delta, strategy);
  }

  m.attach(user, delta);
  return m;
}

void TokenMapping::attach(const Vocabulary& user, const Vocabulary& delta) {
  if (entries.size() != user.size() || delta_size != delta.size()) {
    fail_data("mapping is " + std::to_string(entries.size()) + "x" + std::to_string(delta_size) +
              " but vocabularies are " + std::to_string(user.size()) + "x" + std::to_string(delta.size()));
  }
  user_tag = user.tag();
  delta_tag = delta.tag();
  stats = {};
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (Vocabulary::is_special(id)) {
      ++stats.special;
    } else if (entries[i] == kUnmapped) {
      ++stats.unmapped;
    } else if (delta.token(entries[i]) == user.token(id)) {
      ++stats.exact;
    } else {
      ++stats.approximate;
    }
  }
}

TokenMapping TokenMapping::identity(const Vocabulary& vocab) {
  TokenMapping m;
  m.strategy = MapStrategy::exact;
  m.delta_size = vocab.size();
  m.user_tag = m.delta_tag = vocab.tag();
  m.entries.resize(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) m.entries[i] = static_cast<TokenId>(i);
  m.stats.special = Vocabulary::kNumSpecials;
  m.stats.exact = vocab.size() - Vocabulary::kNumSpecials;
  return m;
}

template <typename T>
std::vector<T> scatter_logits(std::span<const T> delta_logits, const TokenMapping& m) {
  if (delta_logits.size() != m.delta_size) {
    fail("scatter_logits: expected " + std::to_string(m.delta_size) + " delta logits, got " +
         std::to_string(delta_logits.size()));
  }
  std::vector<T> out(m.entries.size(), T(0));
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (m.entries[i] != kUnmapped) out[i] = delta_logits[static_cast<std::size_t>(m.entries[i])];
  }
  return out;
}

template std::vector<float> scatter_logits(std::span<const float>, const TokenMapping&);
template std::vector<double> scatter_logits(std::span<const double>, const TokenMapping&);

void TokenMapping::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("cannot write mapping file " + path.string());
  out << "cmc-map v1 " << to_string(strategy) << ' ' << entries.size() << ' ' << delta_size << '\n';
  for (std::size_t i = 0; i < entries.size(); ++i) out << i << ' ' << entries[i] << '\n';
}

TokenMapping TokenMapping::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot read mapping file " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, version, strategy;
  std::size_t n_user = 0, n_delta = 0;
  if (!(hs >> magic >> version >> strategy >> n_user >> n_delta) || magic != "cmc-map" || version != "v1") {
    fail_data("mapping file " + path.string() + ": bad header '" + header + "'");
  }
  TokenMapping m;
  m.strategy = parse_strategy(strategy);
  m.delta_size = n_delta;
  m.entries.assign(n_user, kUnmapped);
  std::vector<bool> seen(n_user, false);
  long long uid = 0, did = 0;
  std::size_t lines = 0;
  while (in >> uid >> did) {
    if (uid < 0 || static_cast<std::size_t>(uid) >= n_user || seen[static_cast<std::size_t>(uid)]) {
      fail_data("mapping file " + path.string() + ": bad user id " + std::to_string(uid));
    }
    if (did < -1 || did >= static_cast<long long>(n_delta)) {
      fail_data("mapping file " + path.string() + ": delta id out of range " + std::to_string(did));
    }
    seen[static_cast<std::size_t>(uid)] = true;
    m.entries[static_cast<std::size_t>(uid)] = static_cast<TokenId>(did);
    ++lines;
  }
  if (lines != n_user) fail_data("mapping file " + path.string() + ": expected " + std::to_string(n_user) + " entries");
  for (std::size_t i = 0; i < n_user; ++i) {
    if (Vocabulary::is_special(static_cast<TokenId>(i))) {
      ++m.stats.special;
    } else if (m.entries[i] == kUnmapped) {
      ++m.stats.unmapped;
    } else {
      ++m.stats.approximate;  // exactness needs the vocabularies; see build_mapping
    }
  }
  return m;
}

std::vector<MatchReportRow> largest_distance_matches(const TokenMapping& m, const Vocabulary& user,
                                                     const Vocabulary& delta, std::size_t limit) {
  std::vector<MatchReportRow> rows;
  for (std::size_t i = Vocabulary::kNumSpecials; i < m.entries.size(); ++i) {
    if (m.entries[i] == kUnmapped) continue;
    rows.push_back({static_cast<TokenId>(i), m.entries[i],
                    edit_distance(user.token(static_cast<TokenId>(i)), delta.token(m.entries[i]))});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.distance > b.distance; });
  if (rows.size() > limit) rows.resize(limit);
  return rows;
}

Vocabulary load_token_list(const std::filesystem::path& path, std::string_view strip_prefix) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot read token list " + path.string());
  static const std::unordered_set<std::string> specials = {"<bos>", "<eos>", "<pad>", "<unk>"};
  std::vector<std::string> content;
  std::unordered_set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!strip_prefix.empty() && line.rfind(strip_prefix, 0) == 0) line.erase(0, strip_prefix.size());
    if (line.empty() || specials.count(line) || !seen.insert(line).second) continue;
    content.push_back(line);
  }
  return Vocabulary::from_content(content);
}

}  // namespace cmc
