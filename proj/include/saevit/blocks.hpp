#pragma once

#include <string>

#include "saevit/ops.hpp"
#include "saevit/rng.hpp"
#include "saevit/tensor.hpp"

namespace saevit {

// Composite learnable blocks. Each block has a parameter struct, a pure
// forward, a cached forward, and a backward that accumulates into a grads
// struct of the same type and returns dx. Gradients are hand-chained.

inline constexpr float kLayerNormEps = 1e-5f;

template <typename T>
struct LayerNormParamsT {
  TensorT<T> gamma, beta;  // (C)
};

template <typename T>
struct ConvStemParamsT {
  // 3x3 stride-2 pad-1 (3 -> C1), then two 3x3 stride-1 pad-1 (C1 -> C1),
  // each conv followed by norm + GELU. Halves H and W exactly.
  TensorT<T> conv0_w, conv0_b;
  LayerNormParamsT<T> norm0;
  TensorT<T> conv1_w, conv1_b;
  LayerNormParamsT<T> norm1;
  TensorT<T> conv2_w, conv2_b;
  LayerNormParamsT<T> norm2;
};

template <typename T>
struct PatchEmbedParamsT {
  TensorT<T> conv_w, conv_b;  // (Cout, Cin, k, k)
  LayerNormParamsT<T> norm;
  int kernel = 3, stride = 2, pad = 1;
};

template <typename T>
struct LfeParamsT {
  TensorT<T> dw_w, dw_b;  // 3x3 depthwise, channel-preserving
};

template <typename T>
struct FdParamsT {
  TensorT<T> scale;           // y_c, (Ce), initialized to 0 => FD is identity
  TensorT<T> conv_w, conv_b;  // 3x3 depthwise on Ce
};

enum class FfnKind { kFfn, kDwsFfn, kCiFfn };

const char* ffn_kind_name(FfnKind k);
FfnKind ffn_kind_from_name(const std::string& name);

template <typename T>
struct FfnParamsT {
  FfnKind kind = FfnKind::kCiFfn;
  LayerNormParamsT<T> norm;
  TensorT<T> conv1_w, conv1_b;  // 1x1, C -> Ce
  TensorT<T> dw_w, dw_b;        // 3x3 depthwise on Ce; absent for kFfn
  FdParamsT<T> fd;              // kCiFfn only
  TensorT<T> conv2_w, conv2_b;  // 1x1, Ce -> C
};

// ---- construction (init draws from rng in declaration order) ----
template <typename T>
LayerNormParamsT<T> make_layer_norm(std::int64_t c);
template <typename T>
ConvStemParamsT<T> make_conv_stem(std::int64_t c1, RngState& rng);
template <typename T>
PatchEmbedParamsT<T> make_patch_embed(std::int64_t cin, std::int64_t cout, int kernel, int stride,
                                      int pad, RngState& rng);
template <typename T>
LfeParamsT<T> make_lfe(std::int64_t c, RngState& rng);
template <typename T>
FdParamsT<T> make_fd(std::int64_t ce, RngState& rng);
template <typename T>
FfnParamsT<T> make_ffn(FfnKind kind, std::int64_t c, std::int64_t ce, RngState& rng);

// Weight init helpers shared with the attention module.
template <typename T>
void fill_trunc_normal(TensorT<T>& t, RngState& rng, double stddev);
template <typename T>
void fill_fanout_normal(TensorT<T>& t, RngState& rng, std::int64_t fan_out);

// ---- forwards ----
template <typename T>
TensorT<T> conv_stem_forward(const TensorT<T>& x, const ConvStemParamsT<T>& p);
template <typename T>
TensorT<T> patch_embed_forward(const TensorT<T>& x, const PatchEmbedParamsT<T>& p);
template <typename T>
TensorT<T> lfe_forward(const TensorT<T>& x, const LfeParamsT<T>& p);
template <typename T>
TensorT<T> fd_forward(const TensorT<T>& x, const FdParamsT<T>& p);
template <typename T>
TensorT<T> ffn_forward(const TensorT<T>& x, const FfnParamsT<T>& p);

// ---- cached forwards + backwards ----
template <typename T>
struct ConvStemCacheT {
  TensorT<T> x, y0, n0, a0, y1, n1, a1, y2, n2;
};
template <typename T>
TensorT<T> conv_stem_forward_cached(const TensorT<T>& x, const ConvStemParamsT<T>& p,
                                    ConvStemCacheT<T>& cache);
template <typename T>
TensorT<T> conv_stem_backward(const TensorT<T>& dy, const ConvStemCacheT<T>& cache,
                              const ConvStemParamsT<T>& p, ConvStemParamsT<T>& grads);

template <typename T>
struct PatchEmbedCacheT {
  TensorT<T> x, conv_out;
};
template <typename T>
TensorT<T> patch_embed_forward_cached(const TensorT<T>& x, const PatchEmbedParamsT<T>& p,
                                      PatchEmbedCacheT<T>& cache);
template <typename T>
TensorT<T> patch_embed_backward(const TensorT<T>& dy, const PatchEmbedCacheT<T>& cache,
                                const PatchEmbedParamsT<T>& p, PatchEmbedParamsT<T>& grads);

template <typename T>
struct LfeCacheT {
  TensorT<T> x, pre;  // pre = DWConv(x), before GELU
};
template <typename T>
TensorT<T> lfe_forward_cached(const TensorT<T>& x, const LfeParamsT<T>& p, LfeCacheT<T>& cache);
template <typename T>
TensorT<T> lfe_backward(const TensorT<T>& dy, const LfeCacheT<T>& cache, const LfeParamsT<T>& p,
                        LfeParamsT<T>& grads);

template <typename T>
struct FdCacheT {
  TensorT<T> x, v;  // v = x + Conv(x)
};
template <typename T>
TensorT<T> fd_forward_cached(const TensorT<T>& x, const FdParamsT<T>& p, FdCacheT<T>& cache);
template <typename T>
TensorT<T> fd_backward(const TensorT<T>& dy, const FdCacheT<T>& cache, const FdParamsT<T>& p,
                       FdParamsT<T>& grads);

template <typename T>
struct FfnCacheT {
  TensorT<T> x, normed, h1, hdw, act;  // hdw defined only when the dw stage exists
  FdCacheT<T> fd;
  TensorT<T> fd_out;
};
template <typename T>
TensorT<T> ffn_forward_cached(const TensorT<T>& x, const FfnParamsT<T>& p, FfnCacheT<T>& cache);
template <typename T>
TensorT<T> ffn_backward(const TensorT<T>& dy, const FfnCacheT<T>& cache, const FfnParamsT<T>& p,
                        FfnParamsT<T>& grads);

// ---- structure-preserving clones and parameter visitation ----
template <typename T>
TensorT<T> zeros_like(const TensorT<T>& t) {
  return t.defined() ? TensorT<T>(t.shape()) : TensorT<T>();
}

template <typename T, typename Fn>
void visit_params(LayerNormParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

template <typename T, typename Fn>
void visit_params(ConvStemParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".conv0.w", p.conv0_w);
  fn(prefix + ".conv0.b", p.conv0_b);
  visit_params(p.norm0, prefix + ".norm0", fn);
  fn(prefix + ".conv1.w", p.conv1_w);
  fn(prefix + ".conv1.b", p.conv1_b);
  visit_params(p.norm1, prefix + ".norm1", fn);
  fn(prefix + ".conv2.w", p.conv2_w);
  fn(prefix + ".conv2.b", p.conv2_b);
  visit_params(p.norm2, prefix + ".norm2", fn);
}

template <typename T, typename Fn>
void visit_params(PatchEmbedParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".conv.w", p.conv_w);
  fn(prefix + ".conv.b", p.conv_b);
  visit_params(p.norm, prefix + ".norm", fn);
}

template <typename T, typename Fn>
void visit_params(LfeParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".dw.w", p.dw_w);
  fn(prefix + ".dw.b", p.dw_b);
}

template <typename T, typename Fn>
void visit_params(FdParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".scale", p.scale);
  fn(prefix + ".conv.w", p.conv_w);
  fn(prefix + ".conv.b", p.conv_b);
}

template <typename T, typename Fn>
void visit_params(FfnParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.norm, prefix + ".norm", fn);
  fn(prefix + ".conv1.w", p.conv1_w);
  fn(prefix + ".conv1.b", p.conv1_b);
  if (p.dw_w.defined()) {
    fn(prefix + ".dw.w", p.dw_w);
    fn(prefix + ".dw.b", p.dw_b);
  }
  if (p.kind == FfnKind::kCiFfn) visit_params(p.fd, prefix + ".fd", fn);
  fn(prefix + ".conv2.w", p.conv2_w);
  fn(prefix + ".conv2.b", p.conv2_b);
}

template <typename T>
LayerNormParamsT<T> zeros_like(const LayerNormParamsT<T>& p) {
  return {zeros_like(p.gamma), zeros_like(p.beta)};
}
template <typename T>
ConvStemParamsT<T> zeros_like(const ConvStemParamsT<T>& p) {
  ConvStemParamsT<T> g;
  g.conv0_w = zeros_like(p.conv0_w);
  g.conv0_b = zeros_like(p.conv0_b);
  g.norm0 = zeros_like(p.norm0);
  g.conv1_w = zeros_like(p.conv1_w);
  g.conv1_b = zeros_like(p.conv1_b);
  g.norm1 = zeros_like(p.norm1);
  g.conv2_w = zeros_like(p.conv2_w);
  g.conv2_b = zeros_like(p.conv2_b);
  g.norm2 = zeros_like(p.norm2);
  return g;
}
template <typename T>
PatchEmbedParamsT<T> zeros_like(const PatchEmbedParamsT<T>& p) {
  PatchEmbedParamsT<T> g;
  g.conv_w = zeros_like(p.conv_w);
  g.conv_b = zeros_like(p.conv_b);
  g.norm = zeros_like(p.norm);
  g.kernel = p.kernel;
  g.stride = p.stride;
  g.pad = p.pad;
  return g;
}
template <typename T>
LfeParamsT<T> zeros_like(const LfeParamsT<T>& p) {
  return {zeros_like(p.dw_w), zeros_like(p.dw_b)};
}
template <typename T>
FdParamsT<T> zeros_like(const FdParamsT<T>& p) {
  return {zeros_like(p.scale), zeros_like(p.conv_w), zeros_like(p.conv_b)};
}
template <typename T>
FfnParamsT<T> zeros_like(const FfnParamsT<T>& p) {
  FfnParamsT<T> g;
  g.kind = p.kind;
  g.norm = zeros_like(p.norm);
  g.conv1_w = zeros_like(p.conv1_w);
  g.conv1_b = zeros_like(p.conv1_b);
  g.dw_w = zeros_like(p.dw_w);
  g.dw_b = zeros_like(p.dw_b);
  g.fd = zeros_like(p.fd);
  g.conv2_w = zeros_like(p.conv2_w);
  g.conv2_b = zeros_like(p.conv2_b);
  return g;
}

}  // namespace saevit
