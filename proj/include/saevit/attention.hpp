#pragma once

#include "saevit/blocks.hpp"
#include "saevit/ops.hpp"
#include "saevit/rng.hpp"
#include "saevit/tensor.hpp"

namespace saevit {

// Multi-head attention core plus the three spatial-reduction strategies:
// SAA (pool the whole normalized map, attend, deconv back up, residual),
// SRA (queries at full resolution, pooled projected keys/values), and plain
// non-overlapping window attention.

template <typename T>
struct MhsaParamsT {
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;  // w: (C,C), b: (C)
  int heads = 1;
};

template <typename T>
MhsaParamsT<T> make_mhsa(std::int64_t c, int heads, RngState& rng);

// Scaled dot-product over already-projected q/k/v token sets. With a null
// cache the (Lq,Lk) score matrices live in per-head scratch only, which keeps
// the full-resolution benchmark paths inside memory budgets.
template <typename T>
struct AttnCoreCacheT {
  TensorT<T> qh, kh, vh;  // (N, h, L, d)
  TensorT<T> probs;       // (N, h, Lq, Lk)
};
template <typename T>
TensorT<T> attn_core_forward(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                             int heads, AttnCoreCacheT<T>* cache);
template <typename T>
void attn_core_backward(const TensorT<T>& dy, const AttnCoreCacheT<T>& cache, int heads,
                        TensorT<T>& dq, TensorT<T>& dk, TensorT<T>& dv);

// ---- token-level MHSA: softmax(Q K^T / sqrt(d)) V, heads merged, out proj ----
template <typename T>
struct MhsaCacheT {
  TensorT<T> tokens;     // (N,L,C) input
  AttnCoreCacheT<T> core;
  TensorT<T> heads_out;  // (N,L,C) pre output-projection
};
template <typename T>
TensorT<T> mhsa_forward(const TensorT<T>& tokens, const MhsaParamsT<T>& p);
template <typename T>
TensorT<T> mhsa_forward_cached(const TensorT<T>& tokens, const MhsaParamsT<T>& p,
                               MhsaCacheT<T>& cache);
// Accumulates into grads; adds the token gradient into dtokens if non-null.
template <typename T>
void mhsa_backward(const TensorT<T>& dy, const MhsaCacheT<T>& cache, const MhsaParamsT<T>& p,
                   MhsaParamsT<T>& grads, TensorT<T>* dtokens);

// ---- SAA ----
template <typename T>
struct SaaConfigT {
  int sr = 1;
  TensorT<T> deconv_w, deconv_b;  // depthwise, k = stride = sr; absent when sr == 1
};
template <typename T>
struct SaaParamsT {
  LayerNormParamsT<T> norm;
  MhsaParamsT<T> attn;
  SaaConfigT<T> cfg;
};
template <typename T>
SaaParamsT<T> make_saa(std::int64_t c, int heads, int sr, RngState& rng);

template <typename T>
TensorT<T> saa_forward(const TensorT<T>& x, const SaaParamsT<T>& p);
template <typename T>
struct SaaCacheT {
  TensorT<T> x, normed;
  Shape pooled_shape;
  MhsaCacheT<T> mhsa;
  TensorT<T> attn_map;  // (N,C,H/sr,W/sr)
};
template <typename T>
TensorT<T> saa_forward_cached(const TensorT<T>& x, const SaaParamsT<T>& p, SaaCacheT<T>& cache);
template <typename T>
TensorT<T> saa_backward(const TensorT<T>& dy, const SaaCacheT<T>& cache, const SaaParamsT<T>& p,
                        SaaParamsT<T>& grads);

// ---- SRA ----
template <typename T>
struct SraParamsT {
  LayerNormParamsT<T> norm;
  MhsaParamsT<T> attn;
  int sr = 1;
};
template <typename T>
SraParamsT<T> make_sra(std::int64_t c, int heads, int sr, RngState& rng);

template <typename T>
TensorT<T> sra_forward(const TensorT<T>& x, const SraParamsT<T>& p);
template <typename T>
struct SraCacheT {
  TensorT<T> x, tokens;  // tokens of the normalized map
  Shape kfull_shape;     // (N,C,H,W) shape of projected K/V before pooling
  AttnCoreCacheT<T> core;
  TensorT<T> heads_out;
};
template <typename T>
TensorT<T> sra_forward_cached(const TensorT<T>& x, const SraParamsT<T>& p, SraCacheT<T>& cache);
template <typename T>
TensorT<T> sra_backward(const TensorT<T>& dy, const SraCacheT<T>& cache, const SraParamsT<T>& p,
                        SraParamsT<T>& grads);

// ---- window attention ----
template <typename T>
struct WindowAttnParamsT {
  LayerNormParamsT<T> norm;
  MhsaParamsT<T> attn;
  int win = 7;
};
template <typename T>
WindowAttnParamsT<T> make_window_attn(std::int64_t c, int heads, int win, RngState& rng);

template <typename T>
TensorT<T> window_attn_forward(const TensorT<T>& x, const WindowAttnParamsT<T>& p);
template <typename T>
struct WindowAttnCacheT {
  TensorT<T> x;
  MhsaCacheT<T> mhsa;
};
template <typename T>
TensorT<T> window_attn_forward_cached(const TensorT<T>& x, const WindowAttnParamsT<T>& p,
                                      WindowAttnCacheT<T>& cache);
template <typename T>
TensorT<T> window_attn_backward(const TensorT<T>& dy, const WindowAttnCacheT<T>& cache,
                                const WindowAttnParamsT<T>& p, WindowAttnParamsT<T>& grads);

// (N,C,H,W) -> (N*nWin, win*win, C), windows row-major over the window grid.
template <typename T>
TensorT<T> window_partition(const TensorT<T>& x, int win);
template <typename T>
TensorT<T> window_unpartition(const TensorT<T>& t, int win, std::int64_t n, std::int64_t c,
                              std::int64_t h, std::int64_t w);

template <typename T, typename Fn>
void visit_params(MhsaParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".wq", p.wq);
  fn(prefix + ".bq", p.bq);
  fn(prefix + ".wk", p.wk);
  fn(prefix + ".bk", p.bk);
  fn(prefix + ".wv", p.wv);
  fn(prefix + ".bv", p.bv);
  fn(prefix + ".wo", p.wo);
  fn(prefix + ".bo", p.bo);
}
template <typename T, typename Fn>
void visit_params(SaaParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.norm, prefix + ".norm", fn);
  visit_params(p.attn, prefix + ".attn", fn);
  if (p.cfg.deconv_w.defined()) {
    fn(prefix + ".deconv.w", p.cfg.deconv_w);
    fn(prefix + ".deconv.b", p.cfg.deconv_b);
  }
}
template <typename T, typename Fn>
void visit_params(SraParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.norm, prefix + ".norm", fn);
  visit_params(p.attn, prefix + ".attn", fn);
}
template <typename T, typename Fn>
void visit_params(WindowAttnParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.norm, prefix + ".norm", fn);
  visit_params(p.attn, prefix + ".attn", fn);
}

template <typename T>
MhsaParamsT<T> zeros_like(const MhsaParamsT<T>& p) {
  MhsaParamsT<T> g;
  g.heads = p.heads;
  g.wq = zeros_like(p.wq);
  g.bq = zeros_like(p.bq);
  g.wk = zeros_like(p.wk);
  g.bk = zeros_like(p.bk);
  g.wv = zeros_like(p.wv);
  g.bv = zeros_like(p.bv);
  g.wo = zeros_like(p.wo);
  g.bo = zeros_like(p.bo);
  return g;
}
template <typename T>
SaaParamsT<T> zeros_like(const SaaParamsT<T>& p) {
  SaaParamsT<T> g;
  g.norm = zeros_like(p.norm);
  g.attn = zeros_like(p.attn);
  g.cfg.sr = p.cfg.sr;
  g.cfg.deconv_w = zeros_like(p.cfg.deconv_w);
  g.cfg.deconv_b = zeros_like(p.cfg.deconv_b);
  return g;
}
template <typename T>
SraParamsT<T> zeros_like(const SraParamsT<T>& p) {
  SraParamsT<T> g;
  g.norm = zeros_like(p.norm);
  g.attn = zeros_like(p.attn);
  g.sr = p.sr;
  return g;
}
template <typename T>
WindowAttnParamsT<T> zeros_like(const WindowAttnParamsT<T>& p) {
  WindowAttnParamsT<T> g;
  g.norm = zeros_like(p.norm);
  g.attn = zeros_like(p.attn);
  g.win = p.win;
  return g;
}

}  // namespace saevit
