#pragma once

// Dense kernels behind the transformer. The top-level namespace holds the
// OpenMP versions used by the model; `serial` holds plain reference loops
// kept for testing and benchmarking. Both operate on row-major buffers.
//
// Every parallel kernel splits work over independent output rows, so each
// output element is produced by the same instruction sequence regardless of
// the thread count.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cmc::kernels {

inline constexpr double kLayerNormEps = 1e-5;

// Minimum multiply-adds before a kernel forks threads.
inline constexpr std::size_t kParallelThreshold = 1 << 15;

namespace detail {

template <typename S>
inline S dot(const S* a, const S* b, std::size_t n) {
  S acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename S>
inline void axpy(S alpha, const S* x, S* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename S>
inline S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.70710678118654752440)));
}

template <typename S>
inline S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
  const S pdf = std::exp(S(-0.5) * x * x) * S(0.39894228040143267794);
  return cdf + x * pdf;
}

}  // namespace detail

// y[n×m] = x[n×k] · w[k×m] (+ b[m])
template <typename S>
void linear_forward(const S* x, const S* w, const S* b, S* y, std::size_t n, std::size_t k,
                    std::size_t m) {
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for if (n * k * m >= kParallelThreshold)
  for (std::int64_t i = 0; i < rows; ++i) {
    S* yi = y + static_cast<std::size_t>(i) * m;
    const S* xi = x + static_cast<std::size_t>(i) * k;
    for (std::size_t j = 0; j < m; ++j) yi[j] = b ? b[j] : S(0);
    for (std::size_t p = 0; p < k; ++p) detail::axpy(xi[p], w + p * m, yi, m);
  }
}

// dx[n×k] += dy[n×m] · wᵀ
template <typename S>
void linear_backward_input(const S* dy, const S* w, S* dx, std::size_t n, std::size_t k,
                           std::size_t m) {
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for if (n * k * m >= kParallelThreshold)
  for (std::int64_t i = 0; i < rows; ++i) {
    const S* dyi = dy + static_cast<std::size_t>(i) * m;
    S* dxi = dx + static_cast<std::size_t>(i) * k;
    for (std::size_t p = 0; p < k; ++p) dxi[p] += detail::dot(dyi, w + p * m, m);
  }
}

// dw[k×m] += xᵀ · dy, db[m] += Σ_rows dy
template <typename S>
void linear_backward_params(const S* x, const S* dy, S* dw, S* db, std::size_t n, std::size_t k,
                            std::size_t m) {
  const auto cols = static_cast<std::int64_t>(k);
#pragma omp parallel for if (n * k * m >= kParallelThreshold)
  for (std::int64_t p = 0; p < cols; ++p) {
    S* dwp = dw + static_cast<std::size_t>(p) * m;
    for (std::size_t i = 0; i < n; ++i) detail::axpy(x[i * k + static_cast<std::size_t>(p)], dy + i * m, dwp, m);
  }
  if (db) {
    for (std::size_t i = 0; i < n; ++i) detail::axpy(S(1), dy + i * m, db, m);
  }
}

// Row-wise layer normalization. Saves per-row mean and reciprocal std.
template <typename S>
void layernorm_forward(const S* x, const S* gain, const S* bias, S* y, S* mean, S* rstd,
                       std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    const S* xi = x + i * d;
    S mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<S>(d);
    S var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<S>(d);
    const S r = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    mean[i] = mu;
    rstd[i] = r;
    S* yi = y + i * d;
    for (std::size_t j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * r * gain[j] + bias[j];
  }
}

template <typename S>
void layernorm_backward(const S* dy, const S* x, const S* gain, const S* mean, const S* rstd,
                        S* dx, S* dgain, S* dbias, std::size_t n, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    const S* dyi = dy + i * d;
    const S* xi = x + i * d;
    S* dxi = dx + i * d;
    const S mu = mean[i];
    const S r = rstd[i];
    S sum_dxhat = 0;
    S sum_dxhat_xhat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const S xhat = (xi[j] - mu) * r;
      const S dxhat = dyi[j] * gain[j];
      dgain[j] += dyi[j] * xhat;
      dbias[j] += dyi[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const S inv_d = S(1) / static_cast<S>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const S xhat = (xi[j] - mu) * r;
      const S dxhat = dyi[j] * gain[j];
      dxi[j] += r * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
  }
}

template <typename S>
void gelu_forward(const S* x, S* y, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) y[i] = detail::gelu(x[i]);
}

template <typename S>
void gelu_backward(const S* x, const S* dy, S* dx, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) dx[i] += dy[i] * detail::gelu_grad(x[i]);
}

// Causal multi-head attention. qkv is [t×3d] laid out as [q | k | v];
// probs is [heads×t×t] (upper triangle left zero); out is [t×d].
template <typename S>
void attention_forward(const S* qkv, S* probs, S* out, std::size_t t, std::size_t d,
                       std::size_t heads) {
  const std::size_t hd = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  const std::size_t stride = 3 * d;
  const auto nh = static_cast<std::int64_t>(heads);
#pragma omp parallel for if (t * t * d >= kParallelThreshold)
  for (std::int64_t hh = 0; hh < nh; ++hh) {
    const auto h = static_cast<std::size_t>(hh);
    for (std::size_t i = 0; i < t; ++i) {
      S* p = probs + (h * t + i) * t;
      const S* q = qkv + i * stride + h * hd;
      S mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = detail::dot(q, qkv + j * stride + d + h * hd, hd) * scale;
        if (p[j] > mx) mx = p[j];
      }
      S sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      const S inv = S(1) / sum;
      for (std::size_t j = 0; j <= i; ++j) p[j] *= inv;
      for (std::size_t j = i + 1; j < t; ++j) p[j] = 0;
      S* o = out + i * d + h * hd;
      for (std::size_t c = 0; c < hd; ++c) o[c] = 0;
      for (std::size_t j = 0; j <= i; ++j) detail::axpy(p[j], qkv + j * stride + 2 * d + h * hd, o, hd);
    }
  }
}

// dqkv must be zero-initialized or hold gradients to accumulate into.
template <typename S>
void attention_backward(const S* qkv, const S* probs, const S* dout, S* dqkv, std::size_t t,
                        std::size_t d, std::size_t heads) {
  const std::size_t hd = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  const std::size_t stride = 3 * d;
  const auto nh = static_cast<std::int64_t>(heads);
#pragma omp parallel for if (t * t * d >= kParallelThreshold)
  for (std::int64_t hh = 0; hh < nh; ++hh) {
    const auto h = static_cast<std::size_t>(hh);
    std::vector<S> dp(t);
    for (std::size_t i = 0; i < t; ++i) {
      const S* p = probs + (h * t + i) * t;
      const S* doi = dout + i * d + h * hd;
      // dv_j += p_ij * do_i ; dp_ij = do_i · v_j
      S acc = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        detail::axpy(p[j], doi, dqkv + j * stride + 2 * d + h * hd, hd);
        dp[j] = detail::dot(doi, qkv + j * stride + 2 * d + h * hd, hd);
        acc += p[j] * dp[j];
      }
      // softmax backward, then through the scaled dot product
      S* dq = dqkv + i * stride + h * hd;
      const S* q = qkv + i * stride + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        const S ds = p[j] * (dp[j] - acc) * scale;
        detail::axpy(ds, qkv + j * stride + d + h * hd, dq, hd);
        detail::axpy(ds, q, dqkv + j * stride + d + h * hd, hd);
      }
    }
  }
}

namespace serial {

template <typename S>
void linear_forward(const S* x, const S* w, const S* b, S* y, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      S acc = b ? b[j] : S(0);
      for (std::size_t p = 0; p < k; ++p) acc += x[i * k + p] * w[p * m + j];
      y[i * m + j] = acc;
    }
  }
}

template <typename S>
void linear_backward_input(const S* dy, const S* w, S* dx, std::size_t n, std::size_t k,
                           std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      S acc = 0;
      for (std::size_t j = 0; j < m; ++j) acc += dy[i * m + j] * w[p * m + j];
      dx[i * k + p] += acc;
    }
  }
}

template <typename S>
void linear_backward_params(const S* x, const S* dy, S* dw, S* db, std::size_t n, std::size_t k,
                            std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < m; ++j) {
      S acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += x[i * k + p] * dy[i * m + j];
      dw[p * m + j] += acc;
    }
  }
  if (db) {
    for (std::size_t j = 0; j < m; ++j) {
      S acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += dy[i * m + j];
      db[j] += acc;
    }
  }
}

template <typename S>
void attention_forward(const S* qkv, S* probs, S* out, std::size_t t, std::size_t d,
                       std::size_t heads) {
  const std::size_t hd = d / heads;
  const std::size_t stride = 3 * d;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      S* p = probs + (h * t + i) * t;
      S mx = -INFINITY;
      for (std::size_t j = 0; j < t; ++j) {
        if (j > i) {
          p[j] = 0;
          continue;
        }
        S s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qkv[i * stride + h * hd + c] * qkv[j * stride + d + h * hd + c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      S sum = 0;
      for (std::size_t j = 0; j <= i; ++j) sum += std::exp(p[j] - mx);
      for (std::size_t j = 0; j <= i; ++j) p[j] = std::exp(p[j] - mx) / sum;
      for (std::size_t c = 0; c < hd; ++c) {
        S acc = 0;
        for (std::size_t j = 0; j <= i; ++j) acc += p[j] * qkv[j * stride + 2 * d + h * hd + c];
        out[i * d + h * hd + c] = acc;
      }
    }
  }
}

}  // namespace serial

}  // namespace cmc::kernels
