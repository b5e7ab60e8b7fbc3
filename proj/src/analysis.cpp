#include "cmc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cmc/compose.hpp"
#include "cmc/error.hpp"
#include "cmc/utf8.hpp"
#include "json.hpp"

namespace cmc {

namespace {

void check_model_vocab(const TinyTransformer& m, const Tokenizer& tok, const char* what) {
  if (m.config().vocab_size != tok.vocab().size()) {
    fail(std::string("vocabulary mismatch: ") + what + " model does not use this tokenizer");
  }
}

ShiftTensor shift_rows(const TinyTransformer& vanilla, const TinyTransformer& tuned, const Example& ex,
                       const std::vector<std::size_t>& rows, const Tokenizer& tok) {
  check_model_vocab(vanilla, tok, "vanilla");
  check_model_vocab(tuned, tok, "tuned");
  const auto lv = forward<float>(vanilla, ex.ids);
  const auto lt = forward<float>(tuned, ex.ids);
  ShiftTensor t;
  t.rows = rows.size();
  t.cols = tok.vocab().size();
  t.vocab_tag = tok.vocab().tag();
  t.response_span = rows;
  t.values.reserve(t.rows * t.cols);
  t.tuned_logits.reserve(t.rows * t.cols);
  for (std::size_t r : rows) {
    const auto pv = log_softmax(lv.row(r));
    const auto pt = log_softmax(lt.row(r));
    for (std::size_t i = 0; i < t.cols; ++i) t.values.push_back(pt[i] - pv[i]);
    const auto raw = lt.row(r);
    t.tuned_logits.insert(t.tuned_logits.end(), raw.begin(), raw.end());
  }
  return t;
}

double lse(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

void check_cloud(const PointCloud& c) {
  if (c.n == 0) fail_data("empty point cloud");
  if (c.points.size() != c.n * c.dim || c.weights.size() != c.n) fail_data("malformed point cloud");
  double total = 0.0;
  for (double w : c.weights) {
    if (!(w >= 0.0)) fail_data("point weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) fail_data("point weights must sum to 1");
}

std::vector<double> squared_distances(const PointCloud& a, const PointCloud& b) {
  std::vector<double> c(a.n * b.n);
  for (std::size_t i = 0; i < a.n; ++i) {
    const double* x = a.points.data() + i * a.dim;
    for (std::size_t j = 0; j < b.n; ++j) {
      const double* y = b.points.data() + j * b.dim;
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim; ++k) {
        const double d = x[k] - y[k];
        s += d * d;
      }
      c[i * b.n + j] = s;
    }
  }
  return c;
}

std::vector<double> log_weights(const std::vector<double>& w) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = w[i] > 0.0 ? std::log(w[i]) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

// out_i = -eps * log sum_j exp(logw_j + (pot_j - C(i, j)) / eps)
void softmin(const std::vector<double>& cost, bool transpose, std::size_t n, std::size_t m,
             const std::vector<double>& logw, const std::vector<double>& pot, double eps, std::vector<double>& out) {
  std::vector<double> tmp(m);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double c = transpose ? cost[j * n + i] : cost[i * m + j];
      tmp[j] = logw[j] + (pot[j] - c) / eps;
    }
    out[i] = -eps * lse(tmp);
  }
}

double marginal_error(const std::vector<double>& cost, const PointCloud& a, const PointCloud& b,
                      const std::vector<double>& f, const std::vector<double>& g, double eps) {
  std::vector<double> col(b.n, 0.0);
  double err = 0.0;
  for (std::size_t i = 0; i < a.n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < b.n; ++j) {
      const double p = a.weights[i] * b.weights[j] * std::exp((f[i] + g[j] - cost[i * b.n + j]) / eps);
      row += p;
      col[j] += p;
    }
    err += std::abs(row - a.weights[i]);
  }
  for (std::size_t j = 0; j < b.n; ++j) err += std::abs(col[j] - b.weights[j]);
  return err;
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

std::vector<std::size_t> token_starts(const Tokenizer& tok, std::string_view text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  for (TokenId id : tok.encode_ids(text)) {
    out.push_back(pos);
    if (id == Vocabulary::kUnk) {
      pos += utf8::sequence_length(static_cast<unsigned char>(text[pos]));
    } else {
      pos += tok.vocab().token(id).size();
    }
  }
  return out;
}

std::vector<std::size_t> common_token_starts(const Tokenizer& a, const Tokenizer& b, std::string_view text) {
  const auto sa = token_starts(a, text);
  const auto sb = token_starts(b, text);
  std::vector<std::size_t> out;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(out));
  return out;
}

ShiftTensor logit_shift(const TinyTransformer& vanilla, const TinyTransformer& tuned, const SupervisedPair& pair,
                        const Tokenizer& tok) {
  const auto ex = encode_example(tok, pair, LossMask::response_only);
  std::vector<std::size_t> rows(ex.rows.begin(), ex.rows.end() - 1);
  return shift_rows(vanilla, tuned, ex, rows, tok);
}

ShiftTensor logit_shift_at(const TinyTransformer& vanilla, const TinyTransformer& tuned, const SupervisedPair& pair,
                           const Tokenizer& tok, const std::vector<std::size_t>& offsets) {
  const auto ex = encode_example(tok, pair, LossMask::response_only);
  const auto starts = token_starts(tok, pair.response);
  std::vector<std::size_t> rows;
  for (std::size_t o : offsets) {
    const auto it = std::lower_bound(starts.begin(), starts.end(), o);
    if (it == starts.end() || *it != o) fail_data("offset " + std::to_string(o) + " is not a token start");
    rows.push_back(ex.rows.front() + static_cast<std::size_t>(it - starts.begin()));
  }
  return shift_rows(vanilla, tuned, ex, rows, tok);
}

Heatmap heatmap(const ShiftTensor& primary, const ShiftTensor& secondary, const TokenMapping& mapping, std::size_t k) {
  if (k == 0 || k > primary.cols) fail_config("heatmap k must be between 1 and the primary vocabulary size");
  if (primary.rows != secondary.rows) fail_data("shift tensors cover different numbers of steps");
  if (mapping.user_size() != primary.cols || mapping.delta_size != secondary.cols) {
    fail_config("token mapping does not match the shift tensors");
  }
  Heatmap h;
  h.k = k;
  h.steps = primary.rows;
  std::vector<TokenId> ids(primary.cols);
  for (std::size_t r = 0; r < primary.rows; ++r) {
    const double* logit = primary.tuned_logits.data() + r * primary.cols;
    const auto shift = primary.row(r);
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
      return logit[a] > logit[b] || (logit[a] == logit[b] && a < b);
    });
    std::vector<TokenId> cols(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(cols.begin(), cols.end(), [&](TokenId a, TokenId b) {
      return shift[a] > shift[b] || (shift[a] == shift[b] && a < b);
    });
    const auto sec = secondary.row(r);
    for (TokenId id : cols) {
      h.primary.push_back(shift[id]);
      const TokenId m = mapping.entries[id];
      h.secondary.push_back(m == kUnmapped ? std::numeric_limits<double>::quiet_NaN() : sec[m]);
    }
    h.columns.push_back(std::move(cols));
  }
  return h;
}

void write_heatmap(const Heatmap& h, const Vocabulary& primary_vocab, const std::filesystem::path& stem) {
  auto write_matrix = [&](const std::vector<double>& m, const char* suffix) {
    auto path = stem;
    path += suffix;
    std::ofstream out(path);
    if (!out) fail_data("cannot write " + path.string());
    out.precision(9);
    for (std::size_t r = 0; r < h.steps; ++r) {
      for (std::size_t c = 0; c < h.k; ++c) {
        if (c) out << '\t';
        const double v = m[r * h.k + c];
        if (std::isnan(v)) {
          out << "NA";
        } else {
          out << v;
        }
      }
      out << '\n';
    }
  };
  write_matrix(h.primary, ".primary.tsv");
  write_matrix(h.secondary, ".secondary.tsv");
  nlohmann::json header;
  header["k"] = h.k;
  header["steps"] = h.steps;
  header["missing"] = "NA";
  auto& tokens = header["tokens"] = nlohmann::json::array();
  for (const auto& cols : h.columns) {
    auto row = nlohmann::json::array();
    for (TokenId id : cols) row.push_back(primary_vocab.token(id));
    tokens.push_back(row);
  }
  auto path = stem;
  path += ".header.json";
  std::ofstream out(path);
  if (!out) fail_data("cannot write " + path.string());
  out << header.dump(2) << '\n';
}

std::vector<double> column_means(const std::vector<double>& matrix, std::size_t steps, std::size_t k) {
  std::vector<double> out(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < steps; ++r) {
      const double v = matrix[r * k + c];
      if (std::isnan(v)) continue;
      s += v;
      ++n;
    }
    out[c] = n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) fail("spearman needs two equal-length series of at least 2 values");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

PointCloud PointCloud::uniform(std::vector<double> points, std::size_t dim) {
  if (dim == 0 || points.size() % dim != 0) fail_data("point buffer is not a whole number of points");
  PointCloud c;
  c.dim = dim;
  c.n = points.size() / dim;
  c.points = std::move(points);
  c.weights.assign(c.n, c.n ? 1.0 / static_cast<double>(c.n) : 0.0);
  return c;
}

double entropic_ot(const PointCloud& a, const PointCloud& b, const SinkhornOptions& opt) {
  check_cloud(a);
  check_cloud(b);
  if (a.dim != b.dim) fail_data("point clouds differ in dimension");
  if (!(opt.epsilon > 0.0)) fail_config("epsilon must be > 0");
  const auto cost = squared_distances(a, b);
  const auto la = log_weights(a.weights);
  const auto lb = log_weights(b.weights);
  const double cmax = *std::max_element(cost.begin(), cost.end());
  std::vector<double> f(a.n, 0.0), g(b.n, 0.0), tf, tg;

  // Both potentials move halfway to their Sinkhorn update, computed from the
  // previous pair, so swapping the clouds swaps the iterates exactly.
  auto sweep = [&](double eps) {
    softmin(cost, false, a.n, b.n, lb, g, eps, tf);
    softmin(cost, true, b.n, a.n, la, f, eps, tg);
    for (std::size_t i = 0; i < a.n; ++i) f[i] = 0.5 * (f[i] + tf[i]);
    for (std::size_t j = 0; j < b.n; ++j) g[j] = 0.5 * (g[j] + tg[j]);
  };

  double eps = std::max(cmax, opt.epsilon);
  while (eps > opt.epsilon) {
    for (int it = 0; it < 10; ++it) sweep(eps);
    eps = std::max(opt.epsilon, eps * 0.5);
  }
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    sweep(opt.epsilon);
    if (it % 10 == 9 && marginal_error(cost, a, b, f, g, opt.epsilon) < opt.tol) break;
  }
  double value = 0.0;
  for (std::size_t i = 0; i < a.n; ++i) value += a.weights[i] * f[i];
  double vb = 0.0;
  for (std::size_t j = 0; j < b.n; ++j) vb += b.weights[j] * g[j];
  return value + vb;
}

double sinkhorn_divergence(const PointCloud& a, const PointCloud& b, const SinkhornOptions& opt) {
  return entropic_ot(a, b, opt) - 0.5 * entropic_ot(a, a, opt) - 0.5 * entropic_ot(b, b, opt);
}

double shift_distance(const ShiftTensor& t1, const ShiftTensor& t2, const TokenMapping* mapping,
                      const SinkhornOptions& opt) {
  if (t1.rows != t2.rows) {
    fail_data("shift tensors have different response lengths (" + std::to_string(t1.rows) + " vs " +
              std::to_string(t2.rows) + ")");
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  if (mapping) {
    if (mapping->user_size() != t1.cols || mapping->delta_size != t2.cols) {
      fail_config("token mapping does not match the shift tensors");
    }
    for (std::size_t i = 0; i < t1.cols; ++i) {
      const TokenId m = mapping->entries[i];
      if (m != kUnmapped) coords.emplace_back(i, static_cast<std::size_t>(m));
    }
  } else {
    if (t1.cols != t2.cols || t1.vocab_tag != t2.vocab_tag) fail("vocabulary mismatch: shift tensors need a mapping");
    for (std::size_t i = 0; i < t1.cols; ++i) coords.emplace_back(i, i);
  }
  if (coords.empty()) fail_data("no mapped coordinates between the shift tensors");
  std::vector<double> p1, p2;
  p1.reserve(t1.rows * coords.size());
  p2.reserve(t2.rows * coords.size());
  for (std::size_t r = 0; r < t1.rows; ++r) {
    const auto r1 = t1.row(r);
    const auto r2 = t2.row(r);
    for (const auto& [i, j] : coords) {
      p1.push_back(r1[i]);
      p2.push_back(r2[j]);
    }
  }
  const auto a = PointCloud::uniform(std::move(p1), coords.size());
  const auto b = PointCloud::uniform(std::move(p2), coords.size());
  return sinkhorn_divergence(a, b, opt) / static_cast<double>(t1.cols);
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = split_ws(candidate);
  const auto r = split_ws(reference);
  if (c.empty() || r.empty()) return 0.0;
  std::vector<std::size_t> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= c.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j) {
      cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[r.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(c.size());
  const double rc = lcs / static_cast<double>(r.size());
  return 2.0 * p * rc / (p + rc);
}

double answer_probability(const TinyTransformer& model, const Tokenizer& tok, std::string_view question,
                          std::string_view answer) {
  if (answer.empty()) fail_data("empty answer");
  check_model_vocab(model, tok, "scored");
  std::vector<TokenId> ids(1, Vocabulary::kBos);
  const auto q = tok.encode_ids(question);
  const auto a = tok.encode_ids(answer);
  ids.insert(ids.end(), q.begin(), q.end());
  ids.insert(ids.end(), a.begin(), a.end());
  if (ids.size() > model.config().context_len) fail_data("context exceeded while scoring an answer");
  const auto logits = forward<float>(model, ids);
  const std::size_t first = q.size();
  double total = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto lp = log_softmax(logits.row(first + k));
    total += lp[static_cast<std::size_t>(a[k])];
  }
  return std::exp(total / static_cast<double>(a.size()));
}

double answer_probability(const SteeredSession& sess, std::string_view question, std::string_view answer) {
  if (answer.empty()) fail_data("empty answer");
  const auto& tok = sess.user_tokenizer();
  const auto a = tok.encode_ids(answer);
  double total = 0.0;
  std::string prefix;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto uids = sess.user_ids_for(question, std::span<const TokenId>(a.data(), k));
    const auto dids = sess.delta_ids_for(question, prefix);
    const auto lp = log_softmax(std::span<const double>(sess.logits_for(uids, dids)));
    total += lp[static_cast<std::size_t>(a[k])];
    if (!Vocabulary::is_special(a[k])) prefix += tok.vocab().token(a[k]);
  }
  return std::exp(total / static_cast<double>(a.size()));
}

double truth_ratio(double paraphrased, const std::vector<double>& perturbed) {
  if (perturbed.empty()) fail_data("truth ratio needs at least one perturbed answer");
  double log_sum = 0.0;
  bool zero = false;
  for (double p : perturbed) {
    if (p <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p);
    }
  }
  if (paraphrased <= 0.0) return std::numeric_limits<double>::infinity();
  if (zero) return 0.0;
  return std::exp(log_sum / static_cast<double>(perturbed.size())) / paraphrased;
}

double truth_ratio(const AnswerScorer& prob, std::string_view question, std::string_view paraphrased,
                   const std::vector<std::string>& perturbed) {
  if (perturbed.empty()) fail_data("truth ratio needs at least one perturbed answer");
  std::vector<double> ps;
  ps.reserve(perturbed.size());
  for (const auto& p : perturbed) ps.push_back(prob(question, p));
  return truth_ratio(prob(question, paraphrased), ps);
}

MetricReport evaluate_qa(SteeredSession& sess, const std::vector<QARecord>& records, const GenerationSpec& gen) {
  MetricReport rep;
  if (records.empty()) return rep;
  const AnswerScorer scorer = [&](std::string_view q, std::string_view a) { return answer_probability(sess, q, a); };
  double tr_sum = 0.0;
  std::size_t tr_n = 0;
  for (const auto& rec : records) {
    ExampleMetrics ex;
    ex.question = rec.question;
    ex.answer = rec.answer;
    ex.generated = generate(sess, rec.question, gen).continuation;
    ex.rouge_l = rouge_l(ex.generated, rec.answer);
    ex.probability = scorer(rec.question, rec.answer);
    ex.truth_ratio = truth_ratio(scorer, rec.question, rec.paraphrased_answer, rec.perturbed_answers);
    rep.rouge_l += ex.rouge_l;
    rep.probability += ex.probability;
    if (std::isfinite(ex.truth_ratio)) {
      tr_sum += ex.truth_ratio;
      ++tr_n;
    } else {
      ++rep.infinite_truth_ratios;
    }
    rep.examples.push_back(std::move(ex));
  }
  const double n = static_cast<double>(records.size());
  rep.rouge_l /= n;
  rep.probability /= n;
  rep.truth_ratio = tr_n ? tr_sum / static_cast<double>(tr_n) : std::numeric_limits<double>::infinity();
  return rep;
}

void write_report(const MetricReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail_data("cannot write " + path.string());
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return "inf";
    return v;
  };
  nlohmann::json summary;
  summary["rouge_l"] = r.rouge_l;
  summary["probability"] = r.probability;
  summary["truth_ratio"] = num(r.truth_ratio);
  summary["infinite_truth_ratios"] = r.infinite_truth_ratios;
  summary["examples"] = r.examples.size();
  out << nlohmann::json{{"summary", summary}}.dump() << '\n';
  for (const auto& e : r.examples) {
    nlohmann::json j;
    j["question"] = e.question;
    j["answer"] = e.answer;
    j["generated"] = e.generated;
    j["rouge_l"] = e.rouge_l;
    j["probability"] = e.probability;
    j["truth_ratio"] = num(e.truth_ratio);
    out << j.dump() << '\n';
  }
}

}  // namespace cmc
