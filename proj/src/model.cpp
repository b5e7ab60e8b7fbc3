#include "cmc/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "cmc/error.hpp"
#include "cmc/kernels.hpp"

namespace cmc {

void ModelConfig::validate() const {
  if (vocab_size < 5) fail_config("vocab_size must be at least 5");
  if (context_len < 2) fail_config("context_len must be at least 2");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) fail_config("model dimensions must be at least 1");
  if (d_model % n_heads != 0) fail_config("d_model not divisible by n_heads");
}

ModelConfig delta_default_config(std::size_t vocab_size) {
  return ModelConfig{vocab_size, 128, 64, 2, 2, 256, 0};
}

ModelConfig llm_default_config(std::size_t vocab_size) {
  return ModelConfig{vocab_size, 128, 128, 4, 4, 512, 0};
}

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout L;
  const std::size_t V = cfg.vocab_size, T = cfg.context_len, d = cfg.d_model, f = cfg.d_ff;
  auto add = [&L](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    L.tensors.push_back({std::move(name), std::move(shape), L.total, n});
    L.total += n;
    return L.tensors.back().offset;
  };
  L.tok_emb = add("tok_emb", {V, d});
  L.pos_emb = add("pos_emb", {T, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer ly{};
    ly.ln1_g = add(p + "ln1.gain", {d});
    ly.ln1_b = add(p + "ln1.bias", {d});
    ly.w_qkv = add(p + "attn.w_qkv", {d, 3 * d});
    ly.b_qkv = add(p + "attn.b_qkv", {3 * d});
    ly.w_o = add(p + "attn.w_out", {d, d});
    ly.b_o = add(p + "attn.b_out", {d});
    ly.ln2_g = add(p + "ln2.gain", {d});
    ly.ln2_b = add(p + "ln2.bias", {d});
    ly.w_fc1 = add(p + "ffn.w_in", {d, f});
    ly.b_fc1 = add(p + "ffn.b_in", {f});
    ly.w_fc2 = add(p + "ffn.w_out", {f, d});
    ly.b_fc2 = add(p + "ffn.b_out", {d});
    L.layers.push_back(ly);
  }
  L.lnf_g = add("lnf.gain", {d});
  L.lnf_b = add("lnf.bias", {d});
  L.w_out = add("out.weight", {d, V});
  L.b_out = add("out.bias", {V});
  return L;
}

const ParamInfo& ParamLayout::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  fail("no parameter named '" + name + "'");
}

std::size_t parameter_count(const ModelConfig& cfg) { return ParamLayout::build(cfg).total; }

template <typename S>
TransformerT<S>::TransformerT(const ModelConfig& cfg)
    : config_(cfg), layout_(ParamLayout::build(cfg)), params_(layout_.total, S(0)) {}

template <typename S>
std::span<S> TransformerT<S>::tensor(const std::string& name) {
  const auto& info = layout_.find(name);
  return {params_.data() + info.offset, info.size};
}

template <typename S>
std::span<const S> TransformerT<S>::tensor(const std::string& name) const {
  const auto& info = layout_.find(name);
  return {params_.data() + info.offset, info.size};
}

template <typename S>
TransformerT<S> init_model(const ModelConfig& cfg, bool zero_output) {
  TransformerT<S> m(cfg);
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&rng](double bound) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return static_cast<S>((2.0 * u - 1.0) * bound);
  };
  auto params = m.params();
  for (const auto& info : m.layout().tensors) {
    const auto& n = info.name;
    auto fill = [&](double bound) {
      for (std::size_t i = 0; i < info.size; ++i) params[info.offset + i] = uniform(bound);
    };
    const bool is_gain = n.ends_with(".gain");
    const bool is_bias = n.ends_with(".bias") || n.ends_with(".b_qkv") || n.ends_with(".b_out") ||
                         n.ends_with(".b_in");
    if (is_gain) {
      for (std::size_t i = 0; i < info.size; ++i) params[info.offset + i] = S(1);
    } else if (is_bias) {
      // zero already
    } else if (n == "tok_emb" || n == "pos_emb") {
      fill(1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    } else if (n == "out.weight" && zero_output) {
      // zero already
    } else {
      fill(1.0 / std::sqrt(static_cast<double>(info.shape.front())));
    }
  }
  return m;
}

template <typename S>
LogitsT<S> forward(const TransformerT<S>& m, std::span<const TokenId> ids, ForwardCache<S>* cache) {
  const auto& cfg = m.config();
  const auto& L = m.layout();
  const std::size_t T = ids.size(), d = cfg.d_model, V = cfg.vocab_size, f = cfg.d_ff, H = cfg.n_heads;
  if (T == 0) fail("empty input sequence");
  if (T > cfg.context_len) {
    fail("context exceeded: " + std::to_string(T) + " tokens > " + std::to_string(cfg.context_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      fail("token id " + std::to_string(id) + " outside model vocabulary of " + std::to_string(V));
    }
  }

  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  c.ids.assign(ids.begin(), ids.end());
  c.t = T;
  const S* P = m.params().data();

  c.x0.assign(T * d, S(0));
  for (std::size_t t = 0; t < T; ++t) {
    const S* te = P + L.tok_emb + static_cast<std::size_t>(ids[t]) * d;
    const S* pe = P + L.pos_emb + t * d;
    for (std::size_t j = 0; j < d; ++j) c.x0[t * d + j] = te[j] + pe[j];
  }

  c.layers.resize(cfg.n_layers);
  const std::vector<S>* x = &c.x0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& ly = L.layers[l];
    auto& cl = c.layers[l];
    if (x != &cl.x_in) cl.x_in = *x;
    cl.ln1.resize(T * d);
    cl.ln1_mean.resize(T);
    cl.ln1_rstd.resize(T);
    kernels::layernorm_forward(cl.x_in.data(), P + ly.ln1_g, P + ly.ln1_b, cl.ln1.data(), cl.ln1_mean.data(),
                               cl.ln1_rstd.data(), T, d);
    cl.qkv.resize(T * 3 * d);
    kernels::linear_forward(cl.ln1.data(), P + ly.w_qkv, P + ly.b_qkv, cl.qkv.data(), T, d, 3 * d);
    cl.probs.resize(H * T * T);
    cl.att.resize(T * d);
    kernels::attention_forward(cl.qkv.data(), cl.probs.data(), cl.att.data(), T, d, H);
    cl.x_mid.resize(T * d);
    kernels::linear_forward(cl.att.data(), P + ly.w_o, P + ly.b_o, cl.x_mid.data(), T, d, d);
    for (std::size_t i = 0; i < T * d; ++i) cl.x_mid[i] += cl.x_in[i];
    cl.ln2.resize(T * d);
    cl.ln2_mean.resize(T);
    cl.ln2_rstd.resize(T);
    kernels::layernorm_forward(cl.x_mid.data(), P + ly.ln2_g, P + ly.ln2_b, cl.ln2.data(), cl.ln2_mean.data(),
                               cl.ln2_rstd.data(), T, d);
    cl.fc1.resize(T * f);
    kernels::linear_forward(cl.ln2.data(), P + ly.w_fc1, P + ly.b_fc1, cl.fc1.data(), T, d, f);
    cl.act.resize(T * f);
    kernels::gelu_forward(cl.fc1.data(), cl.act.data(), T * f);
    std::vector<S> out(T * d);
    kernels::linear_forward(cl.act.data(), P + ly.w_fc2, P + ly.b_fc2, out.data(), T, f, d);
    for (std::size_t i = 0; i < T * d; ++i) out[i] += cl.x_mid[i];
    if (l + 1 < cfg.n_layers) {
      c.layers[l + 1].x_in = std::move(out);
      x = &c.layers[l + 1].x_in;
    } else {
      c.x_final = std::move(out);
      x = &c.x_final;
    }
  }
  c.lnf.resize(T * d);
  c.lnf_mean.resize(T);
  c.lnf_rstd.resize(T);
  kernels::layernorm_forward(c.x_final.data(), P + L.lnf_g, P + L.lnf_b, c.lnf.data(), c.lnf_mean.data(),
                             c.lnf_rstd.data(), T, d);
  LogitsT<S> logits;
  logits.rows = T;
  logits.cols = V;
  logits.values.resize(T * V);
  kernels::linear_forward(c.lnf.data(), P + L.w_out, P + L.b_out, logits.values.data(), T, d, V);
  return logits;
}

template <typename S>
void backward(const TransformerT<S>& m, const ForwardCache<S>& c, std::span<const S> dlogits,
              std::span<S> grads) {
  if (m.frozen()) fail("model is frozen");
  const auto& cfg = m.config();
  const auto& L = m.layout();
  const std::size_t T = c.t, d = cfg.d_model, V = cfg.vocab_size, f = cfg.d_ff, H = cfg.n_heads;
  if (dlogits.size() != T * V) fail("dLogits shape does not match the forward pass");
  if (grads.size() != L.total) fail("gradient buffer does not match the parameter layout");
  const S* P = m.params().data();
  S* G = grads.data();

  std::vector<S> dlnf(T * d, S(0));
  kernels::linear_backward_input(dlogits.data(), P + L.w_out, dlnf.data(), T, d, V);
  kernels::linear_backward_params(c.lnf.data(), dlogits.data(), G + L.w_out, G + L.b_out, T, d, V);
  std::vector<S> dx(T * d, S(0));
  kernels::layernorm_backward(dlnf.data(), c.x_final.data(), P + L.lnf_g, c.lnf_mean.data(), c.lnf_rstd.data(),
                              dx.data(), G + L.lnf_g, G + L.lnf_b, T, d);

  std::vector<S> dact, dfc1, dln2, datt, dqkv, dln1;
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& ly = L.layers[li];
    const auto& cl = c.layers[li];
    // x_out = x_mid + ffn(ln2(x_mid))
    dact.assign(T * f, S(0));
    kernels::linear_backward_input(dx.data(), P + ly.w_fc2, dact.data(), T, f, d);
    kernels::linear_backward_params(cl.act.data(), dx.data(), G + ly.w_fc2, G + ly.b_fc2, T, f, d);
    dfc1.assign(T * f, S(0));
    kernels::gelu_backward(cl.fc1.data(), dact.data(), dfc1.data(), T * f);
    dln2.assign(T * d, S(0));
    kernels::linear_backward_input(dfc1.data(), P + ly.w_fc1, dln2.data(), T, d, f);
    kernels::linear_backward_params(cl.ln2.data(), dfc1.data(), G + ly.w_fc1, G + ly.b_fc1, T, d, f);
    std::vector<S> dx_mid = dx;
    kernels::layernorm_backward(dln2.data(), cl.x_mid.data(), P + ly.ln2_g, cl.ln2_mean.data(), cl.ln2_rstd.data(),
                                dx_mid.data(), G + ly.ln2_g, G + ly.ln2_b, T, d);
    // x_mid = x_in + attn(ln1(x_in))
    datt.assign(T * d, S(0));
    kernels::linear_backward_input(dx_mid.data(), P + ly.w_o, datt.data(), T, d, d);
    kernels::linear_backward_params(cl.att.data(), dx_mid.data(), G + ly.w_o, G + ly.b_o, T, d, d);
    dqkv.assign(T * 3 * d, S(0));
    kernels::attention_backward(cl.qkv.data(), cl.probs.data(), datt.data(), dqkv.data(), T, d, H);
    dln1.assign(T * d, S(0));
    kernels::linear_backward_input(dqkv.data(), P + ly.w_qkv, dln1.data(), T, d, 3 * d);
    kernels::linear_backward_params(cl.ln1.data(), dqkv.data(), G + ly.w_qkv, G + ly.b_qkv, T, d, 3 * d);
    dx = dx_mid;
    kernels::layernorm_backward(dln1.data(), cl.x_in.data(), P + ly.ln1_g, cl.ln1_mean.data(), cl.ln1_rstd.data(),
                                dx.data(), G + ly.ln1_g, G + ly.ln1_b, T, d);
  }

  for (std::size_t t = 0; t < T; ++t) {
    S* gt = G + L.tok_emb + static_cast<std::size_t>(c.ids[t]) * d;
    S* gp = G + L.pos_emb + t * d;
    for (std::size_t j = 0; j < d; ++j) {
      gt[j] += dx[t * d + j];
      gp[j] += dx[t * d + j];
    }
  }
}

template <typename S>
std::vector<S> backward(const TransformerT<S>& m, std::span<const TokenId> ids, std::span<const S> dlogits) {
  if (m.frozen()) fail("model is frozen");
  ForwardCache<S> cache;
  forward(m, ids, &cache);
  std::vector<S> grads(m.layout().total, S(0));
  backward(m, cache, dlogits, std::span<S>(grads));
  return grads;
}

template class TransformerT<float>;
template class TransformerT<double>;
template TransformerT<float> init_model<float>(const ModelConfig&, bool);
template TransformerT<double> init_model<double>(const ModelConfig&, bool);
template LogitsT<float> forward(const TransformerT<float>&, std::span<const TokenId>, ForwardCache<float>*);
template LogitsT<double> forward(const TransformerT<double>&, std::span<const TokenId>, ForwardCache<double>*);
template void backward(const TransformerT<float>&, const ForwardCache<float>&, std::span<const float>, std::span<float>);
template void backward(const TransformerT<double>&, const ForwardCache<double>&, std::span<const double>,
                       std::span<double>);
template std::vector<float> backward(const TransformerT<float>&, std::span<const TokenId>, std::span<const float>);
template std::vector<double> backward(const TransformerT<double>&, std::span<const TokenId>, std::span<const double>);

// ---------------------------------------------------------------------------
// Checkpoints: "CMCK" | u16 version | u32 header bytes | JSON header | f32 LE data

namespace {

constexpr char kMagic[4] = {'C', 'M', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) fail_data("checkpoint truncated while reading " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
  return v;
}

}  // namespace

void save_checkpoint(const TinyTransformer& m, const std::filesystem::path& path) {
  const auto& cfg = m.config();
  nlohmann::json header;
  header["config"] = {{"vocab_size", cfg.vocab_size}, {"context_len", cfg.context_len},
                      {"d_model", cfg.d_model},       {"n_layers", cfg.n_layers},
                      {"n_heads", cfg.n_heads},       {"d_ff", cfg.d_ff},
                      {"seed", cfg.seed}};
  header["dtype"] = "f32";
  auto& table = header["params"] = nlohmann::json::array();
  for (const auto& t : m.layout().tensors) table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put_le<std::uint16_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (float v : m.params()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  if (!out) fail_data("failed writing checkpoint " + path.string());
}

TinyTransformer load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_data("cannot read checkpoint " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    fail_data("checkpoint " + path.string() + ": wrong magic (expected CMCK)");
  }
  const auto version = get_le<std::uint16_t>(in, "version");
  if (version != kVersion) {
    fail_data("checkpoint " + path.string() + ": unsupported format version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint32_t>(in, "header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), header_len)) fail_data("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  ModelConfig cfg;
  try {
    const auto& c = header.at("config");
    cfg.vocab_size = c.at("vocab_size");
    cfg.context_len = c.at("context_len");
    cfg.d_model = c.at("d_model");
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    cfg.d_ff = c.at("d_ff");
    cfg.seed = c.at("seed");
    if (header.at("dtype") != "f32") fail_data("checkpoint dtype must be f32");
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint " + path.string() + ": incomplete header: " + e.what());
  }
  TinyTransformer m(cfg);
  const auto& table = header.at("params");
  const auto& tensors = m.layout().tensors;
  if (table.size() != tensors.size()) fail_data("checkpoint parameter table does not match config");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (table[i].at("name") != tensors[i].name || table[i].at("offset") != tensors[i].offset ||
        table[i].at("shape").get<std::vector<std::size_t>>() != tensors[i].shape) {
      fail_data("checkpoint parameter table mismatch at " + tensors[i].name);
    }
  }
  for (float& v : m.params()) v = std::bit_cast<float>(get_le<std::uint32_t>(in, "parameters"));
  return m;
}

}  // namespace cmc
