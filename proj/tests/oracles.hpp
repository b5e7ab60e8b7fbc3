#pragma once

// Independent reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmc/model.hpp"
#include "cmc/tokenmap.hpp"
#include "cmc/utf8.hpp"
#include "cmc/vocab.hpp"

namespace oracle {

// Levenshtein distance straight from the recursive definition, memoized on
// (i, j) suffix positions.
inline std::size_t edit_distance(const std::u32string& a, const std::u32string& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  auto rec = [&](auto&& self, std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t best = self(self, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, self(self, i + 1, j) + 1);
    best = std::min(best, self(self, i, j + 1) + 1);
    memo[key] = best;
    return best;
  };
  return rec(rec, 0, 0);
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  return edit_distance(cmc::utf8::decode(a), cmc::utf8::decode(b));
}

inline bool is_prefix(std::string_view p, std::string_view s) { return s.substr(0, p.size()) == p; }

// Scans every delta content token.
inline cmc::TokenId match(std::string_view tok, const cmc::Vocabulary& delta, cmc::MapStrategy strategy) {
  for (std::size_t i = cmc::Vocabulary::kNumSpecials; i < delta.size(); ++i) {
    if (delta.tokens()[i] == tok) return static_cast<cmc::TokenId>(i);
  }
  if (strategy == cmc::MapStrategy::exact) return cmc::kUnmapped;
  cmc::TokenId best = cmc::kUnmapped;
  std::size_t best_d = 0;
  for (std::size_t i = cmc::Vocabulary::kNumSpecials; i < delta.size(); ++i) {
    const std::string& d = delta.tokens()[i];
    if (strategy == cmc::MapStrategy::pm_mined && !is_prefix(d, tok) && !is_prefix(tok, d)) continue;
    const std::size_t dist = edit_distance(tok, d);
    bool take = best == cmc::kUnmapped || dist < best_d;
    if (!take && dist == best_d) {
      const std::string& cur = delta.tokens()[static_cast<std::size_t>(best)];
      const auto ld = cmc::utf8::length(d);
      const auto lc = cmc::utf8::length(cur);
      take = ld > lc || (ld == lc && d < cur);
    }
    if (take) {
      best = static_cast<cmc::TokenId>(i);
      best_d = dist;
    }
  }
  return best;
}

// Exact optimal transport between two uniform clouds of equal size by
// enumerating all assignments; squared Euclidean cost, mean over points.
inline double assignment_ot(const std::vector<double>& a, const std::vector<double>& b, std::size_t n,
                            std::size_t dim) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = a[i * dim + k] - b[perm[i] * dim + k];
        c += d * d;
      }
    }
    best = std::min(best, c / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double log_softmax_at(const std::vector<double>& v, std::size_t i) {
  double s = 0;
  for (double x : v) s += std::exp(x);
  return v[i] - std::log(s);
}

// LCS by plain recursion on word lists.
inline std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b, std::size_t i = 0,
                       std::size_t j = 0) {
  if (i == a.size() || j == b.size()) return 0;
  if (a[i] == b[j]) return 1 + lcs(a, b, i + 1, j + 1);
  return std::max(lcs(a, b, i + 1, j), lcs(a, b, i, j + 1));
}

// Central finite differences of L(params) = sum(dlogits * forward(params)).
// Magnitudes below kGradFloor count as zero when forming the relative error.
inline constexpr double kGradFloor = 1e-5;

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

inline GradCheck finite_difference_check(const cmc::TransformerT<double>& model, const std::vector<cmc::TokenId>& ids,
                                         const std::vector<double>& dlogits, double step = 1e-5) {
  auto m = model;
  const auto analytic = cmc::backward<double>(m, std::span<const cmc::TokenId>(ids), std::span<const double>(dlogits));
  auto loss = [&] {
    const auto out = cmc::forward<double>(m, std::span<const cmc::TokenId>(ids));
    double s = 0;
    for (std::size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * dlogits[i];
    return s;
  };
  GradCheck r;
  auto p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + step;
    const double up = loss();
    p[i] = keep - step;
    const double down = loss();
    p[i] = keep;
    const double numeric = (up - down) / (2 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradFloor});
    r.max_rel = std::max(r.max_rel, std::abs(analytic[i] - numeric) / denom);
    ++r.checked;
  }
  return r;
}

// Random strings over a small alphabet, used by the property tests.
inline std::string random_word(std::mt19937_64& rng, std::string_view alphabet, std::size_t min_len,
                               std::size_t max_len) {
  const std::size_t len = min_len + rng() % (max_len - min_len + 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
  return s;
}

inline cmc::Vocabulary random_vocab(std::mt19937_64& rng, std::size_t n, std::string_view alphabet,
                                    std::size_t max_len) {
  std::vector<std::string> content;
  std::vector<std::string> seen;
  while (content.size() < n) {
    auto w = random_word(rng, alphabet, 1, max_len);
    if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
    seen.push_back(w);
    content.push_back(std::move(w));
  }
  return cmc::Vocabulary::from_content(content);
}

}  // namespace oracle
