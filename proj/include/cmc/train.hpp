#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmc/model.hpp"
#include "cmc/vocab.hpp"

namespace cmc {

enum class OptimizerKind { sgd, adam };
enum class LossMask { response_only, full_sequence };

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::optional<double> grad_clip = 1.0;
  std::uint64_t seed = 0;
  LossMask loss_mask = LossMask::response_only;

  void validate() const;
};

struct SupervisedPair {
  std::string prompt;
  std::string response;
};

struct QARecord {
  std::string question;
  std::string answer;
  std::string paraphrased_answer;
  std::vector<std::string> perturbed_answers;
};

struct ForgetRetainDataset {
  std::vector<QARecord> forget;
  std::vector<QARecord> retain;

  void validate() const;
};

// A tokenized training sequence: BOS + prompt + response + EOS. Row t of the
// logits scores ids[t + 1]; `rows` lists the supervised rows.
struct Example {
  std::vector<TokenId> ids;
  std::vector<std::size_t> rows;
};

Example encode_example(const Tokenizer& tok, const SupervisedPair& pair, LossMask mask = LossMask::response_only);

// Mean over masked rows of -log softmax(logits[t])[targets[t + 1]].
double cross_entropy(const LogitsMatrix& logits, const TokenSequence& targets, std::span<const std::size_t> mask);

// Gradient difference: -L(forget) + L(retain).
double unlearn_loss(const LogitsMatrix& logits_f, const TokenSequence& targets_f, std::span<const std::size_t> mask_f,
                    const LogitsMatrix& logits_r, const TokenSequence& targets_r, std::span<const std::size_t> mask_r);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double forget_loss = 0.0;  // unlearning only
  double retain_loss = 0.0;  // unlearning only
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

// Called after every epoch with the model state at that point.
using EpochCallback = std::function<void(const EpochStats&, const TinyTransformer&)>;

// Plain next-token fine-tuning, updating `model` in place.
TrainLog finetune(TinyTransformer& model, const Tokenizer& tok, const std::vector<SupervisedPair>& data,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Trains `delta` so that base(template) + delta fits the data. The template
// must be frozen and share the delta's vocabulary.
TrainLog train_delta(const TinyTransformer& templ, TinyTransformer& delta, const Tokenizer& tok,
                     const std::vector<SupervisedPair>& data, const TrainConfig& cfg, bool logsoftmax_on_base = true,
                     const EpochCallback& on_epoch = {});

// Gradient-difference unlearning on composed logits. Each step takes one
// forget batch and a retain batch sized so that an epoch passes over both sets.
TrainLog train_delta_unlearn(const TinyTransformer& templ, TinyTransformer& delta, const Tokenizer& tok,
                             const ForgetRetainDataset& data, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {});

// Mean response-token cross-entropy of a model (optionally composed with a
// frozen template) over a dataset, without training.
double evaluate_loss(const TinyTransformer& model, const Tokenizer& tok, const std::vector<SupervisedPair>& data,
                     LossMask mask = LossMask::response_only);
double evaluate_composed_loss(const TinyTransformer& templ, const TinyTransformer& delta, const Tokenizer& tok,
                              const std::vector<SupervisedPair>& data, bool logsoftmax_on_base = true);

std::vector<SupervisedPair> as_pairs(const std::vector<QARecord>& records);

}  // namespace cmc
