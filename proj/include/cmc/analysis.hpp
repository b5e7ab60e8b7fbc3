#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "cmc/decode.hpp"
#include "cmc/model.hpp"
#include "cmc/tokenmap.hpp"
#include "cmc/train.hpp"
#include "cmc/vocab.hpp"

namespace cmc {

// Change in next-token log-probabilities caused by fine-tuning, one row per
// response position: log_softmax(tuned) - log_softmax(vanilla).
struct ShiftTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<double> tuned_logits;  // same shape, used to pick heatmap columns
  std::string vocab_tag;
  std::string vanilla_id;
  std::string tuned_id;
  std::vector<std::size_t> response_span;  // logits rows the shift was taken from

  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

// Rows predicting the response tokens (EOS excluded).
ShiftTensor logit_shift(const TinyTransformer& vanilla, const TinyTransformer& tuned, const SupervisedPair& pair,
                        const Tokenizer& tok);

// Rows predicting the response tokens that start at the given byte offsets
// of the response. Offsets must be token starts under `tok`.
ShiftTensor logit_shift_at(const TinyTransformer& vanilla, const TinyTransformer& tuned, const SupervisedPair& pair,
                           const Tokenizer& tok, const std::vector<std::size_t>& offsets);

// Byte offsets at which tokens start in tok.encode(text).
std::vector<std::size_t> token_starts(const Tokenizer& tok, std::string_view text);

// Offsets that are token starts under both tokenizers, so that shift rows of
// two different vocabularies describe the same prediction.
std::vector<std::size_t> common_token_starts(const Tokenizer& a, const Tokenizer& b, std::string_view text);

struct Heatmap {
  std::size_t k = 0;
  std::size_t steps = 0;
  std::vector<double> primary;    // steps × k
  std::vector<double> secondary;  // steps × k, NaN where unmapped
  std::vector<std::vector<TokenId>> columns;  // primary token ids per step, in column order
};

// Per step: the k tokens with the largest tuned logits in the primary
// model, ordered by their primary shift (descending), then the same tokens
// looked up in the secondary shift through the mapping.
Heatmap heatmap(const ShiftTensor& primary, const ShiftTensor& secondary, const TokenMapping& mapping, std::size_t k);

// Writes <stem>.primary.tsv, <stem>.secondary.tsv and <stem>.header.json.
void write_heatmap(const Heatmap& h, const Vocabulary& primary_vocab, const std::filesystem::path& stem);

// Mean of each heatmap column over steps (missing cells skipped).
std::vector<double> column_means(const std::vector<double>& matrix, std::size_t steps, std::size_t k);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct PointCloud {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> points;   // n × dim
  std::vector<double> weights;  // n, sums to 1

  static PointCloud uniform(std::vector<double> points, std::size_t dim);
};

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iters = 5000;
  double tol = 1e-6;
};

// Entropic optimal transport cost with squared Euclidean ground cost,
// evaluated as the dual objective at the Sinkhorn fixed point.
double entropic_ot(const PointCloud& a, const PointCloud& b, const SinkhornOptions& opt = {});

// OT(A,B) - OT(A,A)/2 - OT(B,B)/2.
double sinkhorn_divergence(const PointCloud& a, const PointCloud& b, const SinkhornOptions& opt = {});

// Each shift row is one point of a uniform cloud. T2's coordinates are
// gathered through `mapping` (T1's vocabulary to T2's); coordinates mapped
// to nothing are dropped from both clouds. Divided by |V1|. A null mapping
// requires identical vocabularies.
double shift_distance(const ShiftTensor& t1, const ShiftTensor& t2, const TokenMapping* mapping,
                      const SinkhornOptions& opt = {});

// Whitespace-token LCS F-measure.
double rouge_l(std::string_view candidate, std::string_view reference);

// Geometric-mean probability of the answer tokens given the question.
double answer_probability(const TinyTransformer& model, const Tokenizer& tok, std::string_view question,
                          std::string_view answer);
// Same, with probabilities taken from the session's composed logits.
double answer_probability(const SteeredSession& sess, std::string_view question, std::string_view answer);

// Geometric mean of the perturbed probabilities over the paraphrased one;
// +inf when the paraphrased probability is zero.
double truth_ratio(double paraphrased, const std::vector<double>& perturbed);

using AnswerScorer = std::function<double(std::string_view question, std::string_view answer)>;
double truth_ratio(const AnswerScorer& prob, std::string_view question, std::string_view paraphrased,
                   const std::vector<std::string>& perturbed);

struct ExampleMetrics {
  std::string question;
  std::string answer;
  std::string generated;
  double rouge_l = 0.0;
  double probability = 0.0;
  double truth_ratio = 0.0;
};

struct MetricReport {
  double rouge_l = 0.0;
  double probability = 0.0;
  double truth_ratio = 0.0;  // mean over finite values
  std::size_t infinite_truth_ratios = 0;
  std::vector<ExampleMetrics> examples;
};

// Generates an answer to each question with `gen` and scores it against
// the reference answer.
MetricReport evaluate_qa(SteeredSession& sess, const std::vector<QARecord>& records, const GenerationSpec& gen);

void write_report(const MetricReport& r, const std::filesystem::path& path);

}  // namespace cmc
