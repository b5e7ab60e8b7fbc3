#include "cmc/compose.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmc/error.hpp"

namespace cmc {

namespace {

template <typename T>
double logsumexp_impl(std::span<const T> v) {
  if (v.empty()) fail("log_softmax of an empty vector");
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : v) {
    if (!std::isfinite(x)) fail("log_softmax: non-finite input");
    mx = std::max(mx, static_cast<double>(x));
  }
  double sum = 0.0;
  for (T x : v) sum += std::exp(static_cast<double>(x) - mx);
  return mx + std::log(sum);
}

template <typename T>
std::vector<double> log_softmax_impl(std::span<const T> v) {
  const double lse = logsumexp_impl(v);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]) - lse;
  return out;
}

template <typename T>
std::vector<double> compose_train_impl(std::span<const T> zeta_t, std::span<const T> zeta_d, bool on_base) {
  if (zeta_t.size() != zeta_d.size()) fail("compose_train: length mismatch");
  std::vector<double> out = on_base ? log_softmax_impl(zeta_t) : std::vector<double>(zeta_t.begin(), zeta_t.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<double>(zeta_d[i]);
  return out;
}

std::vector<double> base_of(std::span<const float> zeta_u, bool on_base) {
  if (on_base) return log_softmax_impl(zeta_u);
  return std::vector<double>(zeta_u.begin(), zeta_u.end());
}

}  // namespace

double logsumexp(std::span<const double> v) { return logsumexp_impl(v); }

std::vector<double> log_softmax(std::span<const double> v) { return log_softmax_impl(v); }
std::vector<double> log_softmax(std::span<const float> v) { return log_softmax_impl(v); }

std::vector<double> softmax(std::span<const double> v) {
  auto out = log_softmax_impl(v);
  for (double& x : out) x = std::exp(x);
  return out;
}

std::string_view to_string(ComposeMode m) {
  switch (m) {
    case ComposeMode::cmc: return "cmc";
    case ComposeMode::proxy: return "proxy";
    case ComposeMode::none: return "none";
  }
  return "?";
}

ComposeMode parse_compose_mode(std::string_view name) {
  if (name == "cmc") return ComposeMode::cmc;
  if (name == "proxy") return ComposeMode::proxy;
  if (name == "none") return ComposeMode::none;
  fail_config("unknown composition mode '" + std::string(name) + "'");
}

void CompositionSpec::validate(std::size_t user_vocab, std::size_t delta_vocab) const {
  if (mode == ComposeMode::none) return;
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail_config("alpha must be a finite value >= 0");
  if (mapping) {
    if (mapping->user_size() != user_vocab || mapping->delta_size != delta_vocab) {
      fail_config("token mapping does not match the vocabularies");
    }
  } else if (user_vocab != delta_vocab) {
    fail_config("mode " + std::string(to_string(mode)) + " across different vocabularies requires a token mapping");
  }
}

std::vector<double> compose_train(std::span<const float> zeta_t, std::span<const float> zeta_d,
                                  bool logsoftmax_on_base) {
  return compose_train_impl(zeta_t, zeta_d, logsoftmax_on_base);
}

std::vector<double> compose_train(std::span<const double> zeta_t, std::span<const double> zeta_d,
                                  bool logsoftmax_on_base) {
  return compose_train_impl(zeta_t, zeta_d, logsoftmax_on_base);
}

std::vector<double> compose_infer(std::span<const float> zeta_u, std::span<const float> zeta_d,
                                  const CompositionSpec& spec) {
  std::vector<double> out = base_of(zeta_u, spec.logsoftmax_on_base);
  if (spec.mode == ComposeMode::none) return out;
  if (spec.mode == ComposeMode::proxy) fail("compose_infer: proxy mode needs expert and anti-expert logits");
  spec.validate(zeta_u.size(), zeta_d.size());
  if (spec.mapping) {
    const auto mapped = scatter_logits(zeta_d, *spec.mapping);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += spec.alpha * static_cast<double>(mapped[i]);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += spec.alpha * static_cast<double>(zeta_d[i]);
  }
  return out;
}

std::vector<double> compose_proxy(std::span<const float> zeta_u, std::span<const float> zeta_expert,
                                  std::span<const float> zeta_antiexpert, double alpha) {
  if (zeta_u.size() != zeta_expert.size() || zeta_u.size() != zeta_antiexpert.size()) {
    fail("compose_proxy: length mismatch");
  }
  return compose_proxy_mapped(zeta_u, zeta_expert, zeta_antiexpert, alpha, nullptr);
}

std::vector<double> compose_proxy_mapped(std::span<const float> zeta_u, std::span<const float> zeta_expert,
                                         std::span<const float> zeta_antiexpert, double alpha,
                                         const TokenMapping* mapping) {
  if (zeta_expert.size() != zeta_antiexpert.size()) fail("compose_proxy: expert/anti-expert length mismatch");
  const auto le = log_softmax_impl(zeta_expert);
  const auto la = log_softmax_impl(zeta_antiexpert);
  std::vector<double> diff(le.size());
  for (std::size_t i = 0; i < le.size(); ++i) diff[i] = le[i] - la[i];
  if (mapping) {
    diff = scatter_logits(std::span<const double>(diff), *mapping);
  } else if (diff.size() != zeta_u.size()) {
    fail("compose_proxy: length mismatch");
  }
  std::vector<double> out = log_softmax_impl(zeta_u);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * diff[i];
  return out;
}

}  // namespace cmc
