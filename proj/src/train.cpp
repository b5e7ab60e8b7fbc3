#include "cmc/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <unordered_set>

#include "cmc/compose.hpp"
#include "cmc/error.hpp"

namespace cmc {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) fail_config("learning_rate must be >= 0");
  if (epochs < 1) fail_config("epochs must be at least 1");
  if (batch_size < 1) fail_config("batch_size must be at least 1");
  if (grad_clip && !(*grad_clip > 0.0)) fail_config("grad_clip must be > 0");
}

void ForgetRetainDataset::validate() const {
  if (forget.empty() || retain.empty()) fail_data("forget and retain sets must both be non-empty");
  std::unordered_set<std::string> questions;
  for (const auto& r : forget) questions.insert(r.question);
  for (const auto& r : retain) {
    if (questions.count(r.question)) fail_data("question appears in both forget and retain sets: " + r.question);
  }
}

std::vector<SupervisedPair> as_pairs(const std::vector<QARecord>& records) {
  std::vector<SupervisedPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.question, r.answer});
  return out;
}

Example encode_example(const Tokenizer& tok, const SupervisedPair& pair, LossMask mask) {
  if (pair.response.empty()) fail_data("empty response for prompt '" + pair.prompt + "'");
  Example ex;
  ex.ids.push_back(Vocabulary::kBos);
  const auto p = tok.encode_ids(pair.prompt);
  ex.ids.insert(ex.ids.end(), p.begin(), p.end());
  const std::size_t first = mask == LossMask::response_only ? ex.ids.size() - 1 : 0;
  const auto r = tok.encode_ids(pair.response);
  ex.ids.insert(ex.ids.end(), r.begin(), r.end());
  ex.ids.push_back(Vocabulary::kEos);
  for (std::size_t t = first; t + 1 < ex.ids.size(); ++t) ex.rows.push_back(t);
  return ex;
}

namespace {

// -log softmax(row)[target]; writes (softmax - onehot) * scale into grad when given.
template <typename Row>
double row_loss(const Row& row, std::size_t n, TokenId target, double scale, float* grad) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(row[i]));
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(static_cast<double>(row[i]) - mx);
  const double lse = mx + std::log(sum);
  if (grad) {
    for (std::size_t i = 0; i < n; ++i) {
      double g = std::exp(static_cast<double>(row[i]) - lse);
      if (static_cast<TokenId>(i) == target) g -= 1.0;
      grad[i] = static_cast<float>(g * scale);
    }
  }
  return lse - static_cast<double>(row[static_cast<std::size_t>(target)]);
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::adam) {
      m_.assign(n, 0.0f);
      v_.assign(n, 0.0f);
    }
  }

  void step(std::span<float> params, std::span<float> grads) {
    if (cfg_.grad_clip) {
      double sq = 0.0;
      for (float g : grads) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > *cfg_.grad_clip) {
        const auto s = static_cast<float>(*cfg_.grad_clip / norm);
        for (float& g : grads) g *= s;
      }
    }
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= static_cast<float>(lr * grads[i]);
      return;
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      const double m = b1 * m_[i] + (1.0 - b1) * g;
      const double v = b2 * v_[i] + (1.0 - b2) * g * g;
      m_[i] = static_cast<float>(m);
      v_[i] = static_cast<float>(v);
      params[i] -= static_cast<float>(lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps));
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<float> m_, v_;
  std::size_t t_ = 0;
};

void shuffle(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

std::vector<Example> encode_all(const Tokenizer& tok, const std::vector<SupervisedPair>& data, LossMask mask,
                                std::size_t context_len) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& p : data) {
    out.push_back(encode_example(tok, p, mask));
    if (out.back().ids.size() > context_len) {
      fail_data("context exceeded: training example of " + std::to_string(out.back().ids.size()) +
                " tokens > context " + std::to_string(context_len) + " ('" + p.prompt + "')");
    }
  }
  return out;
}

// Frozen-side logits for each supervised row, already passed through
// log_softmax when composing in log space.
using BaseRows = std::vector<std::vector<double>>;

BaseRows precompute_base(const TinyTransformer& templ, const std::vector<Example>& examples, bool on_base) {
  BaseRows out;
  out.reserve(examples.size());
  const std::size_t V = templ.config().vocab_size;
  for (const auto& ex : examples) {
    const auto logits = forward<float>(templ, ex.ids);
    std::vector<double> rows;
    rows.reserve(ex.rows.size() * V);
    for (std::size_t r : ex.rows) {
      const auto row = logits.row(r);
      if (on_base) {
        const auto ls = log_softmax(row);
        rows.insert(rows.end(), ls.begin(), ls.end());
      } else {
        rows.insert(rows.end(), row.begin(), row.end());
      }
    }
    out.push_back(std::move(rows));
  }
  return out;
}

// Forward + backward on one example; accumulates scaled gradients and returns the summed row loss.
double accumulate_example(const TinyTransformer& model, const Example& ex, const std::vector<double>* base,
                          double scale, std::span<float> grads, ForwardCache<float>& cache,
                          std::vector<float>& dlogits, std::vector<double>& composed) {
  const auto logits = forward<float>(model, ex.ids, &cache);
  const std::size_t V = logits.cols;
  dlogits.assign(logits.values.size(), 0.0f);
  double loss = 0.0;
  for (std::size_t k = 0; k < ex.rows.size(); ++k) {
    const std::size_t r = ex.rows[k];
    const auto row = logits.row(r);
    const TokenId target = ex.ids[r + 1];
    float* g = dlogits.data() + r * V;
    if (base) {
      composed.resize(V);
      const double* b = base->data() + k * V;
      for (std::size_t i = 0; i < V; ++i) composed[i] = b[i] + static_cast<double>(row[i]);
      loss += row_loss(composed, V, target, scale, g);
    } else {
      loss += row_loss(row, V, target, scale, g);
    }
  }
  backward<float>(model, cache, dlogits, grads);
  return loss;
}

std::size_t count_rows(const std::vector<Example>& examples, const std::vector<std::size_t>& order, std::size_t begin,
                       std::size_t end) {
  std::size_t n = 0;
  for (std::size_t i = begin; i < end; ++i) n += examples[order[i]].rows.size();
  return n;
}

TrainLog run_supervised(TinyTransformer& model, const std::vector<Example>& examples, const BaseRows* base,
                        const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (model.frozen()) fail("model is frozen");
  if (examples.empty()) fail_data("no training examples");
  Optimizer opt(cfg, model.params().size());
  std::vector<float> grads(model.params().size());
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(cfg.seed);
  ForwardCache<float> cache;
  std::vector<float> dlogits;
  std::vector<double> composed;
  TrainLog log;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    std::size_t epoch_rows = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::size_t n = count_rows(examples, order, b, e);
      if (n == 0) continue;
      std::fill(grads.begin(), grads.end(), 0.0f);
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t idx = order[i];
        epoch_loss += accumulate_example(model, examples[idx], base ? &(*base)[idx] : nullptr,
                                         1.0 / static_cast<double>(n), grads, cache, dlogits, composed);
      }
      epoch_rows += n;
      opt.step(model.params(), grads);
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_rows, 1));
    log.epochs.push_back(st);
    if (on_epoch) on_epoch(st, model);
  }
  return log;
}

void check_delta_pair(const TinyTransformer& templ, const TinyTransformer& delta) {
  if (!templ.frozen()) fail("template model must be frozen");
  if (delta.frozen()) fail("model is frozen");
  if (templ.config().vocab_size != delta.config().vocab_size) {
    fail("vocabulary mismatch: template and delta must share a tokenizer during training");
  }
}

}  // namespace

double cross_entropy(const LogitsMatrix& logits, const TokenSequence& targets, std::span<const std::size_t> mask) {
  if (mask.empty()) fail("no supervised positions");
  double total = 0.0;
  for (std::size_t t : mask) {
    if (t >= logits.rows || t + 1 >= targets.ids.size()) fail("cross_entropy: mask position out of range");
    total += row_loss(logits.row(t), logits.cols, targets.ids[t + 1], 0.0, nullptr);
  }
  return total / static_cast<double>(mask.size());
}

double unlearn_loss(const LogitsMatrix& logits_f, const TokenSequence& targets_f, std::span<const std::size_t> mask_f,
                    const LogitsMatrix& logits_r, const TokenSequence& targets_r,
                    std::span<const std::size_t> mask_r) {
  return -cross_entropy(logits_f, targets_f, mask_f) + cross_entropy(logits_r, targets_r, mask_r);
}

TrainLog finetune(TinyTransformer& model, const Tokenizer& tok, const std::vector<SupervisedPair>& data,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (model.frozen()) fail("model is frozen");
  if (tok.vocab().size() != model.config().vocab_size) fail("vocabulary mismatch between tokenizer and model");
  const auto examples = encode_all(tok, data, cfg.loss_mask, model.config().context_len);
  return run_supervised(model, examples, nullptr, cfg, on_epoch);
}

TrainLog train_delta(const TinyTransformer& templ, TinyTransformer& delta, const Tokenizer& tok,
                     const std::vector<SupervisedPair>& data, const TrainConfig& cfg, bool logsoftmax_on_base,
                     const EpochCallback& on_epoch) {
  cfg.validate();
  check_delta_pair(templ, delta);
  if (tok.vocab().size() != delta.config().vocab_size) fail("vocabulary mismatch between tokenizer and delta");
  const std::size_t ctx = std::min(templ.config().context_len, delta.config().context_len);
  const auto examples = encode_all(tok, data, cfg.loss_mask, ctx);
  const auto base = precompute_base(templ, examples, logsoftmax_on_base);
  return run_supervised(delta, examples, &base, cfg, on_epoch);
}

TrainLog train_delta_unlearn(const TinyTransformer& templ, TinyTransformer& delta, const Tokenizer& tok,
                             const ForgetRetainDataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  data.validate();
  check_delta_pair(templ, delta);
  if (tok.vocab().size() != delta.config().vocab_size) fail("vocabulary mismatch between tokenizer and delta");
  const std::size_t ctx = std::min(templ.config().context_len, delta.config().context_len);
  const auto forget = encode_all(tok, as_pairs(data.forget), LossMask::response_only, ctx);
  const auto retain = encode_all(tok, as_pairs(data.retain), LossMask::response_only, ctx);
  const auto base_f = precompute_base(templ, forget, true);
  const auto base_r = precompute_base(templ, retain, true);

  Optimizer opt(cfg, delta.params().size());
  std::vector<float> grads(delta.params().size());
  std::vector<std::size_t> order_f(forget.size()), order_r(retain.size());
  for (std::size_t i = 0; i < order_f.size(); ++i) order_f[i] = i;
  for (std::size_t i = 0; i < order_r.size(); ++i) order_r[i] = i;
  std::mt19937_64 rng(cfg.seed);
  shuffle(order_r, rng);
  std::size_t cursor_r = 0;
  ForwardCache<float> cache;
  std::vector<float> dlogits;
  std::vector<double> composed;
  TrainLog log;
  const std::size_t steps = (order_f.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t retain_per_step = (order_r.size() + steps - 1) / steps;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order_f, rng);
    double loss_f = 0.0, loss_r = 0.0;
    std::size_t rows_f = 0, rows_r = 0;
    for (std::size_t b = 0; b < order_f.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order_f.size(), b + cfg.batch_size);
      std::vector<std::size_t> batch_r;
      for (std::size_t k = 0; k < retain_per_step; ++k) {
        if (cursor_r == order_r.size()) {
          shuffle(order_r, rng);
          cursor_r = 0;
        }
        batch_r.push_back(order_r[cursor_r++]);
      }
      std::fill(grads.begin(), grads.end(), 0.0f);
      const std::size_t nf = count_rows(forget, order_f, b, e);
      std::size_t nr = 0;
      for (std::size_t idx : batch_r) nr += retain[idx].rows.size();
      // ascent on the forget batch, descent on the retain batch
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t idx = order_f[i];
        loss_f += accumulate_example(delta, forget[idx], &base_f[idx], -1.0 / static_cast<double>(nf), grads, cache,
                                     dlogits, composed);
      }
      for (std::size_t idx : batch_r) {
        loss_r += accumulate_example(delta, retain[idx], &base_r[idx], 1.0 / static_cast<double>(nr), grads, cache,
                                     dlogits, composed);
      }
      rows_f += nf;
      rows_r += nr;
      opt.step(delta.params(), grads);
    }
    EpochStats st;
    st.epoch = epoch;
    st.forget_loss = loss_f / static_cast<double>(std::max<std::size_t>(rows_f, 1));
    st.retain_loss = loss_r / static_cast<double>(std::max<std::size_t>(rows_r, 1));
    st.loss = -st.forget_loss + st.retain_loss;
    log.epochs.push_back(st);
    if (on_epoch) on_epoch(st, delta);
  }
  return log;
}

double evaluate_loss(const TinyTransformer& model, const Tokenizer& tok, const std::vector<SupervisedPair>& data,
                     LossMask mask) {
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& p : data) {
    const auto ex = encode_example(tok, p, mask);
    const auto logits = forward<float>(model, ex.ids);
    for (std::size_t r : ex.rows) total += row_loss(logits.row(r), logits.cols, ex.ids[r + 1], 0.0, nullptr);
    rows += ex.rows.size();
  }
  if (rows == 0) fail("no supervised positions");
  return total / static_cast<double>(rows);
}

double evaluate_composed_loss(const TinyTransformer& templ, const TinyTransformer& delta, const Tokenizer& tok,
                              const std::vector<SupervisedPair>& data, bool logsoftmax_on_base) {
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& p : data) {
    const auto ex = encode_example(tok, p, LossMask::response_only);
    const auto lt = forward<float>(templ, ex.ids);
    const auto ld = forward<float>(delta, ex.ids);
    for (std::size_t r : ex.rows) {
      const auto composed = compose_train(lt.row(r), ld.row(r), logsoftmax_on_base);
      total += row_loss(composed, composed.size(), ex.ids[r + 1], 0.0, nullptr);
    }
    rows += ex.rows.size();
  }
  if (rows == 0) fail("no supervised positions");
  return total / static_cast<double>(rows);
}

}  // namespace cmc
