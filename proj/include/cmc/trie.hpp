#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace cmc {

// Byte-level trie mapping strings to integer ids. Used for greedy
// longest-match tokenization and for prefix-relative candidate lookup.
class ByteTrie {
 public:
  static constexpr std::int32_t kNone = -1;

  ByteTrie() : nodes_(1) {}

  void insert(std::string_view key, std::int32_t id) {
    std::int32_t node = 0;
    for (char c : key) node = child_or_create(node, static_cast<unsigned char>(c));
    nodes_[node].id = id;
  }

  // Longest key that is a prefix of text[pos..]. Returns {id, byte length},
  // or {kNone, 0} when no key matches.
  std::pair<std::int32_t, std::size_t> longest_match(std::string_view text,
                                                     std::size_t pos) const {
    std::pair<std::int32_t, std::size_t> best{kNone, 0};
    std::int32_t node = 0;
    for (std::size_t i = pos; i < text.size(); ++i) {
      node = child(node, static_cast<unsigned char>(text[i]));
      if (node == kNone) break;
      if (nodes_[node].id != kNone) best = {nodes_[node].id, i - pos + 1};
    }
    return best;
  }

  // Ids of every key that is a prefix of `key` (including `key` itself).
  void collect_prefixes(std::string_view key, std::vector<std::int32_t>& out) const {
    std::int32_t node = 0;
    for (char c : key) {
      node = child(node, static_cast<unsigned char>(c));
      if (node == kNone) return;
      if (nodes_[node].id != kNone) out.push_back(nodes_[node].id);
    }
  }

  // Ids of every key that has `key` as a strict prefix.
  void collect_extensions(std::string_view key, std::vector<std::int32_t>& out) const {
    std::int32_t node = 0;
    for (char c : key) {
      node = child(node, static_cast<unsigned char>(c));
      if (node == kNone) return;
    }
    std::vector<std::int32_t> stack;
    for (const auto& [byte, next] : nodes_[node].children) stack.push_back(next);
    while (!stack.empty()) {
      const std::int32_t n = stack.back();
      stack.pop_back();
      if (nodes_[n].id != kNone) out.push_back(nodes_[n].id);
      for (const auto& [byte, next] : nodes_[n].children) stack.push_back(next);
    }
  }

 private:
  struct Node {
    std::vector<std::pair<unsigned char, std::int32_t>> children;
    std::int32_t id = kNone;
  };

  std::int32_t child(std::int32_t node, unsigned char c) const {
    for (const auto& [byte, next] : nodes_[node].children) {
      if (byte == c) return next;
    }
    return kNone;
  }

  std::int32_t child_or_create(std::int32_t node, unsigned char c) {
    const std::int32_t existing = child(node, c);
    if (existing != kNone) return existing;
    const auto created = static_cast<std::int32_t>(nodes_.size());
    nodes_.emplace_back();
    nodes_[node].children.emplace_back(c, created);
    return created;
  }

  std::vector<Node> nodes_;
};

}  // namespace cmc
