#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cmc/train.hpp"

namespace cmc {

enum class TaskKind { instruction_format, forget_retain_facts, cross_task_control };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::instruction_format;
  std::size_t size = 100;
  std::uint64_t seed = 0;
  // "{}" stands for the plain answer. An empty marker means the plain answer.
  std::string format_marker = "A: {} END";
  bool heldout = false;          // draw prompts from the held-out part of the pool
  double forget_fraction = 0.25;  // facts task: share of entities in the forget split

  void validate() const;
};

// Question/answer items behind the instruction tasks, split into a training
// and a held-out part by a hash of the question.
struct PoolItem {
  std::string question;
  std::string answer;
};
std::vector<PoolItem> instruction_pool(bool heldout);

std::string apply_format(std::string_view marker, std::string_view answer);
std::string cross_task_format(std::string_view answer);
std::string prompt_for(std::string_view question);

// Prompts "Q: <question> " with responses rendered per the task kind.
std::vector<SupervisedPair> gen_instruction_data(const SyntheticTaskSpec& spec);

// `size` fictitious entities with two questions each, split by entity.
ForgetRetainDataset gen_forget_retain(const SyntheticTaskSpec& spec);

// One JSON object per line.
std::vector<SupervisedPair> read_pairs(const std::filesystem::path& path);
void write_pairs(const std::filesystem::path& path, const std::vector<SupervisedPair>& pairs);
ForgetRetainDataset read_forget_retain(const std::filesystem::path& path);
void write_forget_retain(const std::filesystem::path& path, const ForgetRetainDataset& data);

// Text of every prompt and response, one per line, for tokenizer learning.
std::string corpus_text(const std::vector<SupervisedPair>& pairs);
std::string corpus_text(const ForgetRetainDataset& data);

}  // namespace cmc
