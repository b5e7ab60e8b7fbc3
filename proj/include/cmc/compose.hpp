#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cmc/tokenmap.hpp"

namespace cmc {

// Numerically stable log-softmax with 64-bit accumulation.
std::vector<double> log_softmax(std::span<const double> v);
std::vector<double> log_softmax(std::span<const float> v);
std::vector<double> softmax(std::span<const double> v);
double logsumexp(std::span<const double> v);

enum class ComposeMode { cmc, proxy, none };

std::string_view to_string(ComposeMode m);
ComposeMode parse_compose_mode(std::string_view name);

struct CompositionSpec {
  ComposeMode mode = ComposeMode::cmc;
  double alpha = 1.0;
  bool logsoftmax_on_base = true;
  std::optional<TokenMapping> mapping;

  // Throws when the spec cannot be applied to vocabularies of the given sizes.
  void validate(std::size_t user_vocab, std::size_t delta_vocab) const;
};

// Training-time composition: base(zeta_t) + zeta_d, base = log_softmax or identity.
std::vector<double> compose_train(std::span<const float> zeta_t, std::span<const float> zeta_d,
                                  bool logsoftmax_on_base = true);
std::vector<double> compose_train(std::span<const double> zeta_t, std::span<const double> zeta_d,
                                  bool logsoftmax_on_base = true);

// Inference composition over the user vocabulary:
//   cmc:  base(zeta_u) + alpha * scatter(zeta_d)
//   none: base(zeta_u)
// Without a mapping the two vocabularies must coincide. Proxy mode needs two
// delta-side models and goes through compose_proxy_mapped instead.
std::vector<double> compose_infer(std::span<const float> zeta_u, std::span<const float> zeta_d,
                                  const CompositionSpec& spec);

// Proxy tuning: log_softmax(u) + alpha * (log_softmax(expert) - log_softmax(anti)).
std::vector<double> compose_proxy(std::span<const float> zeta_u, std::span<const float> zeta_expert,
                                  std::span<const float> zeta_antiexpert, double alpha);

// Proxy tuning across vocabularies: the expert/anti-expert log-ratio is
// formed on the delta side and gathered through the mapping.
std::vector<double> compose_proxy_mapped(std::span<const float> zeta_u, std::span<const float> zeta_expert,
                                         std::span<const float> zeta_antiexpert, double alpha,
                                         const TokenMapping* mapping);

}  // namespace cmc
