#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmc/vocab.hpp"

namespace cmc {

enum class MapStrategy { exact, mined, pm_mined };

std::string_view to_string(MapStrategy s);
MapStrategy parse_strategy(std::string_view name);

inline constexpr TokenId kUnmapped = -1;

struct MappingStats {
  std::size_t special = 0;
  std::size_t exact = 0;
  std::size_t approximate = 0;  // mapped by edit distance (prefix-restricted under pm_mined)
  std::size_t unmapped = 0;
};

// Gather table from user-vocabulary ids into delta-vocabulary ids.
struct TokenMapping {
  MapStrategy strategy = MapStrategy::pm_mined;
  std::vector<TokenId> entries;  // length |V_user|; kUnmapped or a delta id
  std::size_t delta_size = 0;
  MappingStats stats;
  std::string user_tag;
  std::string delta_tag;

  std::size_t user_size() const noexcept { return entries.size(); }

  static TokenMapping identity(const Vocabulary& vocab);

  // Checks sizes against the two vocabularies, records their tags and
  // recomputes the exact/approximate split (lost when loading from file).
  void attach(const Vocabulary& user, const Vocabulary& delta);

  void save(const std::filesystem::path& path) const;
  static TokenMapping load(const std::filesystem::path& path);
};

// Levenshtein distance over Unicode scalar values, unit costs.
std::size_t edit_distance(std::u32string_view a, std::u32string_view b);
std::size_t edit_distance(std::string_view a, std::string_view b);

// Content tokens d of `delta` with tok a prefix of d or d a prefix of tok.
// Result is sorted by id.
std::vector<TokenId> prefix_candidates(std::string_view tok, const Vocabulary& delta);

TokenId match_token(std::string_view tok, const Vocabulary& delta, MapStrategy strategy);

TokenMapping build_mapping(const Vocabulary& user, const Vocabulary& delta, MapStrategy strategy);

// out[i] = delta_logits[entries[i]] when mapped, else 0.
template <typename T>
std::vector<T> scatter_logits(std::span<const T> delta_logits, const TokenMapping& m);

extern template std::vector<float> scatter_logits(std::span<const float>, const TokenMapping&);
extern template std::vector<double> scatter_logits(std::span<const double>, const TokenMapping&);

// Matches with the largest edit distance, for reporting.
struct MatchReportRow {
  TokenId user_id;
  TokenId delta_id;
  std::size_t distance;
};
std::vector<MatchReportRow> largest_distance_matches(const TokenMapping& m, const Vocabulary& user,
                                                     const Vocabulary& delta, std::size_t limit);

// Loads an arbitrary one-token-per-line list (e.g. an exported LLM
// vocabulary) as a Vocabulary. Lines equal to a special string are skipped,
// duplicates after stripping are dropped, and `strip_prefix` is removed from
// the front of tokens when non-empty.
Vocabulary load_token_list(const std::filesystem::path& path, std::string_view strip_prefix = {});

}  // namespace cmc
