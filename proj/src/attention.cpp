#include "saevit/attention.hpp"

#include <cmath>

namespace saevit {

namespace {

template <typename T>
void check_heads(std::int64_t c, int heads) {
  if (heads < 1 || c % heads != 0) {
    throw ConfigError("channels " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

template <typename T>
void check_sr(const TensorT<T>& x, int sr, const char* what) {
  if (sr < 1) throw ConfigError(std::string(what) + ": sr must be positive");
  if (x.dim(2) % sr != 0 || x.dim(3) % sr != 0) {
    throw DimensionError(std::string(what) + ": H,W " + shape_str({x.dim(2), x.dim(3)}) +
                         " not divisible by sr " + std::to_string(sr));
  }
}

// Pack one head's (L,d) block from a (N,L,C) token tensor.
template <typename T>
void gather_head(const TensorT<T>& t, std::int64_t n, int h, std::int64_t d, T* out) {
  const std::int64_t l = t.dim(1), c = t.dim(2);
  const T* base = t.ptr() + n * l * c + h * d;
  for (std::int64_t i = 0; i < l; ++i) {
    const T* row = base + i * c;
    T* dst = out + i * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] = row[j];
  }
}

template <typename T>
void scatter_head(const T* in, std::int64_t n, int h, std::int64_t d, TensorT<T>& t) {
  const std::int64_t l = t.dim(1), c = t.dim(2);
  T* base = t.ptr() + n * l * c + h * d;
  for (std::int64_t i = 0; i < l; ++i) {
    const T* src = in + i * d;
    T* row = base + i * c;
    for (std::int64_t j = 0; j < d; ++j) row[j] = src[j];
  }
}

// Row-wise softmax over a packed (rows, cols) matrix.
template <typename T>
void softmax_rows(T* m, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t i = 0; i < rows; ++i) {
    T* row = m + i * cols;
    T mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

}  // namespace

template <typename T>
MhsaParamsT<T> make_mhsa(std::int64_t c, int heads, RngState& rng) {
  check_heads<T>(c, heads);
  MhsaParamsT<T> p;
  p.heads = heads;
  for (TensorT<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    *w = TensorT<T>({c, c});
    fill_trunc_normal(*w, rng, 0.02);
  }
  p.bq = TensorT<T>({c});
  p.bk = TensorT<T>({c});
  p.bv = TensorT<T>({c});
  p.bo = TensorT<T>({c});
  return p;
}

template <typename T>
TensorT<T> attn_core_forward(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                             int heads, AttnCoreCacheT<T>* cache) {
  const std::int64_t n = q.dim(0), lq = q.dim(1), c = q.dim(2), lk = k.dim(1);
  check_heads<T>(c, heads);
  if (k.dim(0) != n || v.dim(0) != n || k.dim(2) != c || v.dim(2) != c || v.dim(1) != lk) {
    throw DimensionError("attention: q/k/v token shapes inconsistent: " + shape_str(q.shape()) +
                         " " + shape_str(k.shape()) + " " + shape_str(v.shape()));
  }
  const std::int64_t d = c / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  TensorT<T> out({n, lq, c});

  if (cache) {
    cache->qh = TensorT<T>({n, heads, lq, d});
    cache->kh = TensorT<T>({n, heads, lk, d});
    cache->vh = TensorT<T>({n, heads, lk, d});
    cache->probs = TensorT<T>({n, heads, lq, lk});
  }
  std::vector<T> qbuf(static_cast<std::size_t>(lq * d)), kbuf(static_cast<std::size_t>(lk * d)),
      vbuf(static_cast<std::size_t>(lk * d)), sbuf(static_cast<std::size_t>(lq * lk)),
      obuf(static_cast<std::size_t>(lq * d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      T* qp = cache ? cache->qh.ptr() + (i * heads + h) * lq * d : qbuf.data();
      T* kp = cache ? cache->kh.ptr() + (i * heads + h) * lk * d : kbuf.data();
      T* vp = cache ? cache->vh.ptr() + (i * heads + h) * lk * d : vbuf.data();
      gather_head(q, i, h, d, qp);
      gather_head(k, i, h, d, kp);
      gather_head(v, i, h, d, vp);
      T* sp = cache ? cache->probs.ptr() + (i * heads + h) * lq * lk : sbuf.data();
      gemm_nt(lq, lk, d, qp, kp, sp);
      for (std::int64_t j = 0; j < lq * lk; ++j) sp[j] *= scale;
      softmax_rows(sp, lq, lk);
      gemm_nn(lq, d, lk, sp, vp, obuf.data());
      scatter_head(obuf.data(), i, h, d, out);
    }
  }
  debug_check_finite(out, "attn_core");
  return out;
}

template <typename T>
void attn_core_backward(const TensorT<T>& dy, const AttnCoreCacheT<T>& cache, int heads,
                        TensorT<T>& dq, TensorT<T>& dk, TensorT<T>& dv) {
  const std::int64_t n = cache.qh.dim(0), lq = cache.qh.dim(2), d = cache.qh.dim(3);
  const std::int64_t lk = cache.kh.dim(2);
  const std::int64_t c = d * heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  dq = TensorT<T>({n, lq, c});
  dk = TensorT<T>({n, lk, c});
  dv = TensorT<T>({n, lk, c});

  std::vector<T> doh(static_cast<std::size_t>(lq * d)), dvh(static_cast<std::size_t>(lk * d)),
      dp(static_cast<std::size_t>(lq * lk)), dqh(static_cast<std::size_t>(lq * d)),
      dkh(static_cast<std::size_t>(lk * d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      gather_head(dy, i, h, d, doh.data());
      const T* probs = cache.probs.ptr() + (i * heads + h) * lq * lk;
      const T* qh = cache.qh.ptr() + (i * heads + h) * lq * d;
      const T* kh = cache.kh.ptr() + (i * heads + h) * lk * d;
      const T* vh = cache.vh.ptr() + (i * heads + h) * lk * d;
      // dV_h = P^T dOut_h
      gemm_tn(lk, d, lq, probs, doh.data(), dvh.data());
      // dP = dOut_h V_h^T
      gemm_nt(lq, lk, d, doh.data(), vh, dp.data());
      // softmax backward per row, then fold in the scale factor
      for (std::int64_t r = 0; r < lq; ++r) {
        const T* pr = probs + r * lk;
        T* dpr = dp.data() + r * lk;
        T dot = 0;
        for (std::int64_t j = 0; j < lk; ++j) dot += pr[j] * dpr[j];
        for (std::int64_t j = 0; j < lk; ++j) dpr[j] = scale * pr[j] * (dpr[j] - dot);
      }
      gemm_nn(lq, d, lk, dp.data(), kh, dqh.data());
      gemm_tn(lk, d, lq, dp.data(), qh, dkh.data());
      scatter_head(dqh.data(), i, h, d, dq);
      scatter_head(dkh.data(), i, h, d, dk);
      scatter_head(dvh.data(), i, h, d, dv);
    }
  }
}

// ------------------------------------------------------------------ MHSA

template <typename T>
TensorT<T> mhsa_forward_cached(const TensorT<T>& tokens, const MhsaParamsT<T>& p,
                               MhsaCacheT<T>& cache) {
  if (tokens.rank() != 3) {
    throw DimensionError("mhsa: tokens must be (N,L,C), got " + shape_str(tokens.shape()));
  }
  cache.tokens = tokens;
  TensorT<T> q = linear(tokens, p.wq, &p.bq);
  TensorT<T> k = linear(tokens, p.wk, &p.bk);
  TensorT<T> v = linear(tokens, p.wv, &p.bv);
  cache.heads_out = attn_core_forward(q, k, v, p.heads, &cache.core);
  return linear(cache.heads_out, p.wo, &p.bo);
}

template <typename T>
TensorT<T> mhsa_forward(const TensorT<T>& tokens, const MhsaParamsT<T>& p) {
  if (tokens.rank() != 3) {
    throw DimensionError("mhsa: tokens must be (N,L,C), got " + shape_str(tokens.shape()));
  }
  TensorT<T> q = linear(tokens, p.wq, &p.bq);
  TensorT<T> k = linear(tokens, p.wk, &p.bk);
  TensorT<T> v = linear(tokens, p.wv, &p.bv);
  TensorT<T> heads_out = attn_core_forward(q, k, v, p.heads, static_cast<AttnCoreCacheT<T>*>(nullptr));
  return linear(heads_out, p.wo, &p.bo);
}

template <typename T>
void mhsa_backward(const TensorT<T>& dy, const MhsaCacheT<T>& cache, const MhsaParamsT<T>& p,
                   MhsaParamsT<T>& grads, TensorT<T>* dtokens) {
  TensorT<T> dheads = zeros_like(cache.heads_out);
  linear_backward(cache.heads_out, p.wo, dy, &dheads, &grads.wo, &grads.bo);
  TensorT<T> dq, dk, dv;
  attn_core_backward(dheads, cache.core, p.heads, dq, dk, dv);
  linear_backward(cache.tokens, p.wq, dq, dtokens, &grads.wq, &grads.bq);
  linear_backward(cache.tokens, p.wk, dk, dtokens, &grads.wk, &grads.bk);
  linear_backward(cache.tokens, p.wv, dv, dtokens, &grads.wv, &grads.bv);
}

// ------------------------------------------------------------------- SAA

template <typename T>
SaaParamsT<T> make_saa(std::int64_t c, int heads, int sr, RngState& rng) {
  if (sr < 1) throw ConfigError("saa: sr must be positive");
  SaaParamsT<T> p;
  p.norm = make_layer_norm<T>(c);
  p.attn = make_mhsa<T>(c, heads, rng);
  p.cfg.sr = sr;
  if (sr > 1) {
    p.cfg.deconv_w = TensorT<T>({c, 1, sr, sr});
    fill_fanout_normal(p.cfg.deconv_w, rng, std::int64_t(sr) * sr);
    p.cfg.deconv_b = TensorT<T>({c});
  }
  return p;
}

template <typename T>
TensorT<T> saa_forward_cached(const TensorT<T>& x, const SaaParamsT<T>& p, SaaCacheT<T>& cache) {
  check_sr(x, p.cfg.sr, "saa");
  const int sr = p.cfg.sr;
  const std::int64_t h = x.dim(2), w = x.dim(3);
  cache.x = x;
  cache.normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  TensorT<T> pooled = sr > 1 ? avg_pool2d(cache.normed, sr, sr) : cache.normed;
  cache.pooled_shape = pooled.shape();
  TensorT<T> tokens = nchw_to_tokens(pooled);
  TensorT<T> attn_tokens = mhsa_forward_cached(tokens, p.attn, cache.mhsa);
  cache.attn_map = tokens_to_nchw(attn_tokens, h / sr, w / sr);
  TensorT<T> y = sr > 1 ? transposed_conv2d(cache.attn_map, p.cfg.deconv_w, &p.cfg.deconv_b, sr,
                                            static_cast<int>(x.dim(1)))
                        : cache.attn_map;
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> saa_forward(const TensorT<T>& x, const SaaParamsT<T>& p) {
  check_sr(x, p.cfg.sr, "saa");
  const int sr = p.cfg.sr;
  const std::int64_t h = x.dim(2), w = x.dim(3);
  TensorT<T> normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  TensorT<T> pooled = sr > 1 ? avg_pool2d(normed, sr, sr) : std::move(normed);
  TensorT<T> attn_tokens = mhsa_forward(nchw_to_tokens(pooled), p.attn);
  TensorT<T> attn_map = tokens_to_nchw(attn_tokens, h / sr, w / sr);
  TensorT<T> y = sr > 1 ? transposed_conv2d(attn_map, p.cfg.deconv_w, &p.cfg.deconv_b, sr,
                                            static_cast<int>(x.dim(1)))
                        : std::move(attn_map);
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> saa_backward(const TensorT<T>& dy, const SaaCacheT<T>& cache, const SaaParamsT<T>& p,
                        SaaParamsT<T>& grads) {
  const int sr = p.cfg.sr;
  const std::int64_t c = cache.x.dim(1);
  TensorT<T> dattn_map;
  if (sr > 1) {
    dattn_map = zeros_like(cache.attn_map);
    transposed_conv2d_backward(cache.attn_map, p.cfg.deconv_w, sr, static_cast<int>(c), dy,
                               &dattn_map, &grads.cfg.deconv_w, &grads.cfg.deconv_b);
  } else {
    dattn_map = dy;
  }
  TensorT<T> dattn_tokens = nchw_to_tokens(dattn_map);
  TensorT<T> dtokens({cache.mhsa.tokens.dim(0), cache.mhsa.tokens.dim(1), cache.mhsa.tokens.dim(2)});
  mhsa_backward(dattn_tokens, cache.mhsa, p.attn, grads.attn, &dtokens);
  TensorT<T> dpooled = tokens_to_nchw(dtokens, cache.pooled_shape[2], cache.pooled_shape[3]);
  TensorT<T> dnormed =
      sr > 1 ? avg_pool2d_backward(dpooled, cache.normed.shape(), sr, sr) : std::move(dpooled);
  TensorT<T> dx = zeros_like(cache.x);
  layer_norm_backward(cache.x, p.norm.gamma, T(kLayerNormEps), dnormed, &dx, &grads.norm.gamma,
                      &grads.norm.beta);
  add_inplace(dx, dy);  // residual
  return dx;
}

// ------------------------------------------------------------------- SRA

template <typename T>
SraParamsT<T> make_sra(std::int64_t c, int heads, int sr, RngState& rng) {
  if (sr < 1) throw ConfigError("sra: sr must be positive");
  SraParamsT<T> p;
  p.norm = make_layer_norm<T>(c);
  p.attn = make_mhsa<T>(c, heads, rng);
  p.sr = sr;
  return p;
}

namespace {
// K/V are reduced *after* projection: pool the projected maps.
template <typename T>
TensorT<T> pool_tokens(const TensorT<T>& tokens, std::int64_t h, std::int64_t w, int sr) {
  if (sr == 1) return tokens;
  TensorT<T> map = tokens_to_nchw(tokens, h, w);
  return nchw_to_tokens(avg_pool2d(map, sr, sr));
}
}  // namespace

template <typename T>
TensorT<T> sra_forward_cached(const TensorT<T>& x, const SraParamsT<T>& p, SraCacheT<T>& cache) {
  check_sr(x, p.sr, "sra");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  cache.x = x;
  TensorT<T> normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  cache.tokens = nchw_to_tokens(normed);
  cache.kfull_shape = {x.dim(0), x.dim(1), h, w};
  TensorT<T> q = linear(cache.tokens, p.attn.wq, &p.attn.bq);
  TensorT<T> k = pool_tokens(linear(cache.tokens, p.attn.wk, &p.attn.bk), h, w, p.sr);
  TensorT<T> v = pool_tokens(linear(cache.tokens, p.attn.wv, &p.attn.bv), h, w, p.sr);
  cache.heads_out = attn_core_forward(q, k, v, p.attn.heads, &cache.core);
  TensorT<T> out_tokens = linear(cache.heads_out, p.attn.wo, &p.attn.bo);
  TensorT<T> y = tokens_to_nchw(out_tokens, h, w);
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> sra_forward(const TensorT<T>& x, const SraParamsT<T>& p) {
  check_sr(x, p.sr, "sra");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  TensorT<T> normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  TensorT<T> tokens = nchw_to_tokens(normed);
  TensorT<T> q = linear(tokens, p.attn.wq, &p.attn.bq);
  TensorT<T> k = pool_tokens(linear(tokens, p.attn.wk, &p.attn.bk), h, w, p.sr);
  TensorT<T> v = pool_tokens(linear(tokens, p.attn.wv, &p.attn.bv), h, w, p.sr);
  TensorT<T> heads_out =
      attn_core_forward(q, k, v, p.attn.heads, static_cast<AttnCoreCacheT<T>*>(nullptr));
  TensorT<T> y = tokens_to_nchw(linear(heads_out, p.attn.wo, &p.attn.bo), h, w);
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> sra_backward(const TensorT<T>& dy, const SraCacheT<T>& cache, const SraParamsT<T>& p,
                        SraParamsT<T>& grads) {
  const std::int64_t h = cache.x.dim(2), w = cache.x.dim(3);
  TensorT<T> dout_tokens = nchw_to_tokens(dy);
  TensorT<T> dheads = zeros_like(cache.heads_out);
  linear_backward(cache.heads_out, p.attn.wo, dout_tokens, &dheads, &grads.attn.wo,
                  &grads.attn.bo);
  TensorT<T> dq, dk, dv;
  attn_core_backward(dheads, cache.core, p.attn.heads, dq, dk, dv);
  TensorT<T> dtokens = zeros_like(cache.tokens);
  linear_backward(cache.tokens, p.attn.wq, dq, &dtokens, &grads.attn.wq, &grads.attn.bq);
  auto unpool = [&](const TensorT<T>& g) {
    if (p.sr == 1) return g;
    TensorT<T> gm = tokens_to_nchw(g, h / p.sr, w / p.sr);
    return nchw_to_tokens(avg_pool2d_backward(gm, cache.kfull_shape, p.sr, p.sr));
  };
  TensorT<T> dkfull = unpool(dk);
  TensorT<T> dvfull = unpool(dv);
  linear_backward(cache.tokens, p.attn.wk, dkfull, &dtokens, &grads.attn.wk, &grads.attn.bk);
  linear_backward(cache.tokens, p.attn.wv, dvfull, &dtokens, &grads.attn.wv, &grads.attn.bv);
  TensorT<T> dnormed = tokens_to_nchw(dtokens, h, w);
  TensorT<T> dx = zeros_like(cache.x);
  layer_norm_backward(cache.x, p.norm.gamma, T(kLayerNormEps), dnormed, &dx, &grads.norm.gamma,
                      &grads.norm.beta);
  add_inplace(dx, dy);
  return dx;
}

// -------------------------------------------------------- window attention

template <typename T>
WindowAttnParamsT<T> make_window_attn(std::int64_t c, int heads, int win, RngState& rng) {
  if (win < 1) throw ConfigError("window attention: win must be positive");
  WindowAttnParamsT<T> p;
  p.norm = make_layer_norm<T>(c);
  p.attn = make_mhsa<T>(c, heads, rng);
  p.win = win;
  return p;
}

template <typename T>
TensorT<T> window_partition(const TensorT<T>& x, int win) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % win != 0 || w % win != 0) {
    throw DimensionError("window attention: H,W " + shape_str({h, w}) +
                         " not divisible by window " + std::to_string(win));
  }
  const std::int64_t gh = h / win, gw = w / win;
  TensorT<T> t({n * gh * gw, std::int64_t(win) * win, c});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t wy = 0; wy < gh; ++wy) {
      for (std::int64_t wx = 0; wx < gw; ++wx) {
        const std::int64_t widx = (i * gh + wy) * gw + wx;
        for (std::int64_t r = 0; r < win; ++r) {
          for (std::int64_t s = 0; s < win; ++s) {
            const std::int64_t tok = r * win + s;
            const std::int64_t ih = wy * win + r, iw = wx * win + s;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              t.at(widx, tok, ch) = x.at(i, ch, ih, iw);
            }
          }
        }
      }
    }
  }
  return t;
}

template <typename T>
TensorT<T> window_unpartition(const TensorT<T>& t, int win, std::int64_t n, std::int64_t c,
                              std::int64_t h, std::int64_t w) {
  const std::int64_t gh = h / win, gw = w / win;
  TensorT<T> x({n, c, h, w});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t wy = 0; wy < gh; ++wy) {
      for (std::int64_t wx = 0; wx < gw; ++wx) {
        const std::int64_t widx = (i * gh + wy) * gw + wx;
        for (std::int64_t r = 0; r < win; ++r) {
          for (std::int64_t s = 0; s < win; ++s) {
            const std::int64_t tok = r * win + s;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              x.at(i, ch, wy * win + r, wx * win + s) = t.at(widx, tok, ch);
            }
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
TensorT<T> window_attn_forward_cached(const TensorT<T>& x, const WindowAttnParamsT<T>& p,
                                      WindowAttnCacheT<T>& cache) {
  cache.x = x;
  TensorT<T> normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  TensorT<T> wt = window_partition(normed, p.win);
  TensorT<T> out = mhsa_forward_cached(wt, p.attn, cache.mhsa);
  TensorT<T> y = window_unpartition(out, p.win, x.dim(0), x.dim(1), x.dim(2), x.dim(3));
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> window_attn_forward(const TensorT<T>& x, const WindowAttnParamsT<T>& p) {
  TensorT<T> normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  TensorT<T> wt = window_partition(normed, p.win);
  TensorT<T> out = mhsa_forward(wt, p.attn);
  TensorT<T> y = window_unpartition(out, p.win, x.dim(0), x.dim(1), x.dim(2), x.dim(3));
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> window_attn_backward(const TensorT<T>& dy, const WindowAttnCacheT<T>& cache,
                                const WindowAttnParamsT<T>& p, WindowAttnParamsT<T>& grads) {
  TensorT<T> dwt = window_partition(dy, p.win);
  TensorT<T> dtokens({cache.mhsa.tokens.dim(0), cache.mhsa.tokens.dim(1), cache.mhsa.tokens.dim(2)});
  mhsa_backward(dwt, cache.mhsa, p.attn, grads.attn, &dtokens);
  TensorT<T> dnormed = window_unpartition(dtokens, p.win, cache.x.dim(0), cache.x.dim(1),
                                          cache.x.dim(2), cache.x.dim(3));
  TensorT<T> dx = zeros_like(cache.x);
  layer_norm_backward(cache.x, p.norm.gamma, T(kLayerNormEps), dnormed, &dx, &grads.norm.gamma,
                      &grads.norm.beta);
  add_inplace(dx, dy);
  return dx;
}

#define SAEVIT_INSTANTIATE_ATTN(T)                                                                \
  template MhsaParamsT<T> make_mhsa<T>(std::int64_t, int, RngState&);                             \
  template TensorT<T> attn_core_forward<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                           const TensorT<T>&, int, AttnCoreCacheT<T>*);          \
  template void attn_core_backward<T>(const TensorT<T>&, const AttnCoreCacheT<T>&, int,          \
                                      TensorT<T>&, TensorT<T>&, TensorT<T>&);                    \
  template TensorT<T> mhsa_forward<T>(const TensorT<T>&, const MhsaParamsT<T>&);                 \
  template TensorT<T> mhsa_forward_cached<T>(const TensorT<T>&, const MhsaParamsT<T>&,           \
                                             MhsaCacheT<T>&);                                    \
  template void mhsa_backward<T>(const TensorT<T>&, const MhsaCacheT<T>&, const MhsaParamsT<T>&, \
                                 MhsaParamsT<T>&, TensorT<T>*);                                  \
  template SaaParamsT<T> make_saa<T>(std::int64_t, int, int, RngState&);                         \
  template TensorT<T> saa_forward<T>(const TensorT<T>&, const SaaParamsT<T>&);                   \
  template TensorT<T> saa_forward_cached<T>(const TensorT<T>&, const SaaParamsT<T>&,             \
                                            SaaCacheT<T>&);                                      \
  template TensorT<T> saa_backward<T>(const TensorT<T>&, const SaaCacheT<T>&,                    \
                                      const SaaParamsT<T>&, SaaParamsT<T>&);                     \
  template SraParamsT<T> make_sra<T>(std::int64_t, int, int, RngState&);                         \
  template TensorT<T> sra_forward<T>(const TensorT<T>&, const SraParamsT<T>&);                   \
  template TensorT<T> sra_forward_cached<T>(const TensorT<T>&, const SraParamsT<T>&,             \
                                            SraCacheT<T>&);                                      \
  template TensorT<T> sra_backward<T>(const TensorT<T>&, const SraCacheT<T>&,                    \
                                      const SraParamsT<T>&, SraParamsT<T>&);                     \
  template WindowAttnParamsT<T> make_window_attn<T>(std::int64_t, int, int, RngState&);          \
  template TensorT<T> window_partition<T>(const TensorT<T>&, int);                               \
  template TensorT<T> window_unpartition<T>(const TensorT<T>&, int, std::int64_t, std::int64_t,  \
                                            std::int64_t, std::int64_t);                         \
  template TensorT<T> window_attn_forward<T>(const TensorT<T>&, const WindowAttnParamsT<T>&);    \
  template TensorT<T> window_attn_forward_cached<T>(const TensorT<T>&,                           \
                                                    const WindowAttnParamsT<T>&,                 \
                                                    WindowAttnCacheT<T>&);                       \
  template TensorT<T> window_attn_backward<T>(const TensorT<T>&, const WindowAttnCacheT<T>&,     \
                                              const WindowAttnParamsT<T>&,                       \
                                              WindowAttnParamsT<T>&);

SAEVIT_INSTANTIATE_ATTN(float)
SAEVIT_INSTANTIATE_ATTN(double)

}  // namespace saevit
