#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cmc/vocab.hpp"

namespace cmc {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale presets: the delta is several times smaller than the models it steers.
ModelConfig delta_default_config(std::size_t vocab_size);
ModelConfig llm_default_config(std::size_t vocab_size);

struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Where each named tensor lives inside the flat parameter buffer.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::vector<Layer> layers;
  std::vector<ParamInfo> tensors;
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& cfg);
  const ParamInfo& find(const std::string& name) const;
};

// Pre-norm decoder-only transformer with learned absolute positions and a
// GELU feed-forward block. All parameters live in one flat buffer; the
// gradient buffer of a backward pass uses the same layout.
template <typename S>
class TransformerT {
 public:
  TransformerT() = default;
  explicit TransformerT(const ModelConfig& cfg);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::span<S> params() noexcept { return params_; }
  std::span<const S> params() const noexcept { return params_; }
  std::span<S> tensor(const std::string& name);
  std::span<const S> tensor(const std::string& name) const;

  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool f) noexcept { frozen_ = f; }

  template <typename U>
  TransformerT<U> cast() const {
    TransformerT<U> out(config_, layout_);
    auto dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    out.set_frozen(frozen_);
    return out;
  }

  TransformerT(const ModelConfig& cfg, const ParamLayout& layout)
      : config_(cfg), layout_(layout), params_(layout.total, S(0)) {}

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<S> params_;
  bool frozen_ = false;
};

using TinyTransformer = TransformerT<float>;

// Seeded init: embeddings and projections ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
// biases and norm offsets 0, norm gains 1. With `zero_output` the output
// projection starts at zero so the model emits all-zero logits.
template <typename S = float>
TransformerT<S> init_model(const ModelConfig& cfg, bool zero_output = false);

// rows × cols logits, row t scoring the token at position t+1.
template <typename S>
struct LogitsT {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<S> values;
  std::string vocab_tag;

  std::span<const S> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<S> row(std::size_t r) { return {values.data() + r * cols, cols}; }
};

using LogitsMatrix = LogitsT<float>;

// Activations saved by a training forward pass.
template <typename S>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::size_t t = 0;
  std::vector<S> x0;
  struct Layer {
    std::vector<S> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd, fc1, act;
  };
  std::vector<Layer> layers;
  std::vector<S> x_final, lnf, lnf_mean, lnf_rstd;
};

template <typename S>
LogitsT<S> forward(const TransformerT<S>& m, std::span<const TokenId> ids, ForwardCache<S>* cache = nullptr);

inline LogitsMatrix forward(const TinyTransformer& m, const TokenSequence& seq) {
  auto out = forward<float>(m, std::span<const TokenId>(seq.ids), nullptr);
  out.vocab_tag = seq.vocab_tag;
  return out;
}

// Accumulates d(loss)/d(params) into `grads` (same layout as params) given
// d(loss)/d(logits) for the cached forward pass.
template <typename S>
void backward(const TransformerT<S>& m, const ForwardCache<S>& cache, std::span<const S> dlogits,
              std::span<S> grads);

// Convenience form: recomputes the forward pass and returns fresh gradients.
template <typename S>
std::vector<S> backward(const TransformerT<S>& m, std::span<const TokenId> ids, std::span<const S> dlogits);

void save_checkpoint(const TinyTransformer& m, const std::filesystem::path& path);
TinyTransformer load_checkpoint(const std::filesystem::path& path);

std::size_t parameter_count(const ModelConfig& cfg);

}  // namespace cmc
