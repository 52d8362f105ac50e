#include "saevit/blocks.hpp"

#include <cmath>

namespace saevit {

const char* ffn_kind_name(FfnKind k) {
  switch (k) {
    case FfnKind::kFfn:
      return "ffn";
    case FfnKind::kDwsFfn:
      return "dwsffn";
    case FfnKind::kCiFfn:
      return "ciffn";
  }
  return "?";
}

FfnKind ffn_kind_from_name(const std::string& name) {
  if (name == "ffn") return FfnKind::kFfn;
  if (name == "dwsffn") return FfnKind::kDwsFfn;
  if (name == "ciffn") return FfnKind::kCiFfn;
  throw ConfigError("unknown ffn kind '" + name + "' (expected ffn|dwsffn|ciffn)");
}

template <typename T>
void fill_trunc_normal(TensorT<T>& t, RngState& rng, double stddev) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(rng.truncated_normal(2.0) * stddev);
  }
}

template <typename T>
void fill_fanout_normal(TensorT<T>& t, RngState& rng, std::int64_t fan_out) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(rng.normal() * stddev);
  }
}

namespace {
// fan_out = kh*kw*Cout/groups, the receptive footprint each output draws on.
template <typename T>
TensorT<T> conv_weight(Shape shape, std::int64_t fan_out, RngState& rng) {
  TensorT<T> w(std::move(shape));
  fill_fanout_normal(w, rng, fan_out);
  return w;
}
}  // namespace

template <typename T>
LayerNormParamsT<T> make_layer_norm(std::int64_t c) {
  LayerNormParamsT<T> p;
  p.gamma = TensorT<T>::full({c}, T(1));
  p.beta = TensorT<T>({c});
  return p;
}

template <typename T>
ConvStemParamsT<T> make_conv_stem(std::int64_t c1, RngState& rng) {
  ConvStemParamsT<T> p;
  p.conv0_w = conv_weight<T>({c1, 3, 3, 3}, 9 * c1, rng);
  p.conv0_b = TensorT<T>({c1});
  p.norm0 = make_layer_norm<T>(c1);
  p.conv1_w = conv_weight<T>({c1, c1, 3, 3}, 9 * c1, rng);
  p.conv1_b = TensorT<T>({c1});
  p.norm1 = make_layer_norm<T>(c1);
  p.conv2_w = conv_weight<T>({c1, c1, 3, 3}, 9 * c1, rng);
  p.conv2_b = TensorT<T>({c1});
  p.norm2 = make_layer_norm<T>(c1);
  return p;
}

template <typename T>
PatchEmbedParamsT<T> make_patch_embed(std::int64_t cin, std::int64_t cout, int kernel, int stride,
                                      int pad, RngState& rng) {
  PatchEmbedParamsT<T> p;
  p.kernel = kernel;
  p.stride = stride;
  p.pad = pad;
  p.conv_w = conv_weight<T>({cout, cin, kernel, kernel}, std::int64_t(kernel) * kernel * cout, rng);
  p.conv_b = TensorT<T>({cout});
  p.norm = make_layer_norm<T>(cout);
  return p;
}

template <typename T>
LfeParamsT<T> make_lfe(std::int64_t c, RngState& rng) {
  LfeParamsT<T> p;
  p.dw_w = conv_weight<T>({c, 1, 3, 3}, 9, rng);
  p.dw_b = TensorT<T>({c});
  return p;
}

template <typename T>
FdParamsT<T> make_fd(std::int64_t ce, RngState& rng) {
  FdParamsT<T> p;
  p.scale = TensorT<T>({ce});  // zeros: FD starts as the identity
  p.conv_w = conv_weight<T>({ce, 1, 3, 3}, 9, rng);
  p.conv_b = TensorT<T>({ce});
  return p;
}

template <typename T>
FfnParamsT<T> make_ffn(FfnKind kind, std::int64_t c, std::int64_t ce, RngState& rng) {
  FfnParamsT<T> p;
  p.kind = kind;
  p.norm = make_layer_norm<T>(c);
  p.conv1_w = TensorT<T>({ce, c, 1, 1});
  fill_trunc_normal(p.conv1_w, rng, 0.02);
  p.conv1_b = TensorT<T>({ce});
  if (kind != FfnKind::kFfn) {
    p.dw_w = conv_weight<T>({ce, 1, 3, 3}, 9, rng);
    p.dw_b = TensorT<T>({ce});
  }
  if (kind == FfnKind::kCiFfn) p.fd = make_fd<T>(ce, rng);
  p.conv2_w = TensorT<T>({c, ce, 1, 1});
  fill_trunc_normal(p.conv2_w, rng, 0.02);
  p.conv2_b = TensorT<T>({c});
  return p;
}

// ------------------------------------------------------------- conv stem

namespace {
template <typename T>
void check_even_hw(const TensorT<T>& x, const char* what) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError(std::string(what) + ": H,W must be even, got " + shape_str(x.shape()));
  }
}
}  // namespace

template <typename T>
TensorT<T> conv_stem_forward_cached(const TensorT<T>& x, const ConvStemParamsT<T>& p,
                                    ConvStemCacheT<T>& cache) {
  check_even_hw(x, "conv_stem");
  cache.x = x;
  cache.y0 = conv2d(x, p.conv0_w, &p.conv0_b, 2, 1);
  cache.n0 = layer_norm(cache.y0, p.norm0.gamma, p.norm0.beta, T(kLayerNormEps));
  cache.a0 = gelu(cache.n0);
  cache.y1 = conv2d(cache.a0, p.conv1_w, &p.conv1_b, 1, 1);
  cache.n1 = layer_norm(cache.y1, p.norm1.gamma, p.norm1.beta, T(kLayerNormEps));
  cache.a1 = gelu(cache.n1);
  cache.y2 = conv2d(cache.a1, p.conv2_w, &p.conv2_b, 1, 1);
  cache.n2 = layer_norm(cache.y2, p.norm2.gamma, p.norm2.beta, T(kLayerNormEps));
  return gelu(cache.n2);
}

template <typename T>
TensorT<T> conv_stem_forward(const TensorT<T>& x, const ConvStemParamsT<T>& p) {
  ConvStemCacheT<T> scratch;
  return conv_stem_forward_cached(x, p, scratch);
}

template <typename T>
TensorT<T> conv_stem_backward(const TensorT<T>& dy, const ConvStemCacheT<T>& cache,
                              const ConvStemParamsT<T>& p, ConvStemParamsT<T>& grads) {
  TensorT<T> d = gelu_backward(cache.n2, dy);
  TensorT<T> dy2 = zeros_like(cache.y2);
  layer_norm_backward(cache.y2, p.norm2.gamma, T(kLayerNormEps), d, &dy2, &grads.norm2.gamma,
                      &grads.norm2.beta);
  TensorT<T> da1 = zeros_like(cache.a1);
  conv2d_backward(cache.a1, p.conv2_w, 1, 1, 1, dy2, &da1, &grads.conv2_w, &grads.conv2_b);

  d = gelu_backward(cache.n1, da1);
  TensorT<T> dy1 = zeros_like(cache.y1);
  layer_norm_backward(cache.y1, p.norm1.gamma, T(kLayerNormEps), d, &dy1, &grads.norm1.gamma,
                      &grads.norm1.beta);
  TensorT<T> da0 = zeros_like(cache.a0);
  conv2d_backward(cache.a0, p.conv1_w, 1, 1, 1, dy1, &da0, &grads.conv1_w, &grads.conv1_b);

  d = gelu_backward(cache.n0, da0);
  TensorT<T> dy0 = zeros_like(cache.y0);
  layer_norm_backward(cache.y0, p.norm0.gamma, T(kLayerNormEps), d, &dy0, &grads.norm0.gamma,
                      &grads.norm0.beta);
  TensorT<T> dx = zeros_like(cache.x);
  conv2d_backward(cache.x, p.conv0_w, 2, 1, 1, dy0, &dx, &grads.conv0_w, &grads.conv0_b);
  return dx;
}

// ----------------------------------------------------------- patch embed

template <typename T>
TensorT<T> patch_embed_forward_cached(const TensorT<T>& x, const PatchEmbedParamsT<T>& p,
                                      PatchEmbedCacheT<T>& cache) {
  if (p.stride == 2 && (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)) {
    throw DimensionError("patch_embed: H,W must be even, got " + shape_str(x.shape()));
  }
  cache.x = x;
  cache.conv_out = conv2d(x, p.conv_w, &p.conv_b, p.stride, p.pad);
  return layer_norm(cache.conv_out, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
}

template <typename T>
TensorT<T> patch_embed_forward(const TensorT<T>& x, const PatchEmbedParamsT<T>& p) {
  PatchEmbedCacheT<T> scratch;
  return patch_embed_forward_cached(x, p, scratch);
}

template <typename T>
TensorT<T> patch_embed_backward(const TensorT<T>& dy, const PatchEmbedCacheT<T>& cache,
                                const PatchEmbedParamsT<T>& p, PatchEmbedParamsT<T>& grads) {
  TensorT<T> dconv = zeros_like(cache.conv_out);
  layer_norm_backward(cache.conv_out, p.norm.gamma, T(kLayerNormEps), dy, &dconv,
                      &grads.norm.gamma, &grads.norm.beta);
  TensorT<T> dx = zeros_like(cache.x);
  conv2d_backward(cache.x, p.conv_w, p.stride, p.pad, 1, dconv, &dx, &grads.conv_w, &grads.conv_b);
  return dx;
}

// ------------------------------------------------------------------ LFE

template <typename T>
TensorT<T> lfe_forward_cached(const TensorT<T>& x, const LfeParamsT<T>& p, LfeCacheT<T>& cache) {
  const std::int64_t c = x.dim(1);
  if (p.dw_w.dim(0) != c) {
    throw DimensionError("lfe: params carry " + std::to_string(p.dw_w.dim(0)) +
                         " channels, input has " + std::to_string(c));
  }
  cache.x = x;
  cache.pre = conv2d(x, p.dw_w, &p.dw_b, 1, 1, static_cast<int>(c));
  TensorT<T> y = gelu(cache.pre);
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> lfe_forward(const TensorT<T>& x, const LfeParamsT<T>& p) {
  LfeCacheT<T> scratch;
  return lfe_forward_cached(x, p, scratch);
}

template <typename T>
TensorT<T> lfe_backward(const TensorT<T>& dy, const LfeCacheT<T>& cache, const LfeParamsT<T>& p,
                        LfeParamsT<T>& grads) {
  TensorT<T> dpre = gelu_backward(cache.pre, dy);
  TensorT<T> dx = zeros_like(cache.x);
  conv2d_backward(cache.x, p.dw_w, 1, 1, static_cast<int>(cache.x.dim(1)), dpre, &dx, &grads.dw_w,
                  &grads.dw_b);
  add_inplace(dx, dy);  // residual branch
  return dx;
}

// ------------------------------------------------------------------- FD

template <typename T>
TensorT<T> fd_forward_cached(const TensorT<T>& x, const FdParamsT<T>& p, FdCacheT<T>& cache) {
  const std::int64_t c = x.dim(1);
  if (p.scale.dim(0) != c) {
    throw DimensionError("fd: scale has " + std::to_string(p.scale.dim(0)) +
                         " channels, input has " + std::to_string(c));
  }
  cache.x = x;
  cache.v = conv2d(x, p.conv_w, &p.conv_b, 1, 1, static_cast<int>(c));
  add_inplace(cache.v, x);  // v = x + Conv(x)
  const std::int64_t n = x.dim(0), plane = x.dim(2) * x.dim(3);
  TensorT<T> y(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T s = p.scale[ch];
      const T* xv = x.ptr() + (i * c + ch) * plane;
      const T* vv = cache.v.ptr() + (i * c + ch) * plane;
      T* yv = y.ptr() + (i * c + ch) * plane;
      for (std::int64_t j = 0; j < plane; ++j) yv[j] = s * vv[j] + xv[j];
    }
  }
  return y;
}

template <typename T>
TensorT<T> fd_forward(const TensorT<T>& x, const FdParamsT<T>& p) {
  FdCacheT<T> scratch;
  return fd_forward_cached(x, p, scratch);
}

template <typename T>
TensorT<T> fd_backward(const TensorT<T>& dy, const FdCacheT<T>& cache, const FdParamsT<T>& p,
                       FdParamsT<T>& grads) {
  const std::int64_t n = cache.x.dim(0), c = cache.x.dim(1);
  const std::int64_t plane = cache.x.dim(2) * cache.x.dim(3);
  // y = s*v + x, v = x + Conv(x)
  TensorT<T> dv(cache.x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T s = p.scale[ch];
      const T* gv = dy.ptr() + (i * c + ch) * plane;
      const T* vv = cache.v.ptr() + (i * c + ch) * plane;
      T* dvv = dv.ptr() + (i * c + ch) * plane;
      T acc = 0;
      for (std::int64_t j = 0; j < plane; ++j) {
        acc += gv[j] * vv[j];
        dvv[j] = gv[j] * s;
      }
      grads.scale[ch] += acc;
    }
  }
  TensorT<T> dx = zeros_like(cache.x);
  conv2d_backward(cache.x, p.conv_w, 1, 1, static_cast<int>(c), dv, &dx, &grads.conv_w,
                  &grads.conv_b);
  add_inplace(dx, dv);  // v = x + ...
  add_inplace(dx, dy);  // + x branch
  return dx;
}

// ----------------------------------------------------------- FFN family

template <typename T>
TensorT<T> ffn_forward_cached(const TensorT<T>& x, const FfnParamsT<T>& p, FfnCacheT<T>& cache) {
  const std::int64_t c = x.dim(1);
  if (p.conv1_w.dim(1) != c) {
    throw DimensionError("ffn: conv1 expects " + std::to_string(p.conv1_w.dim(1)) +
                         " channels, input has " + std::to_string(c));
  }
  cache.x = x;
  cache.normed = layer_norm(x, p.norm.gamma, p.norm.beta, T(kLayerNormEps));
  cache.h1 = conv2d(cache.normed, p.conv1_w, &p.conv1_b, 1, 0);
  const TensorT<T>* pre_act = &cache.h1;
  if (p.kind != FfnKind::kFfn) {
    const std::int64_t ce = cache.h1.dim(1);
    cache.hdw = conv2d(cache.h1, p.dw_w, &p.dw_b, 1, 1, static_cast<int>(ce));
    pre_act = &cache.hdw;
  }
  cache.act = gelu(*pre_act);
  const TensorT<T>* h2 = &cache.act;
  if (p.kind == FfnKind::kCiFfn) {
    cache.fd_out = fd_forward_cached(cache.act, p.fd, cache.fd);
    h2 = &cache.fd_out;
  }
  TensorT<T> y = conv2d(*h2, p.conv2_w, &p.conv2_b, 1, 0);
  add_inplace(y, x);
  return y;
}

template <typename T>
TensorT<T> ffn_forward(const TensorT<T>& x, const FfnParamsT<T>& p) {
  FfnCacheT<T> scratch;
  return ffn_forward_cached(x, p, scratch);
}

template <typename T>
TensorT<T> ffn_backward(const TensorT<T>& dy, const FfnCacheT<T>& cache, const FfnParamsT<T>& p,
                        FfnParamsT<T>& grads) {
  const TensorT<T>& h2 = (p.kind == FfnKind::kCiFfn) ? cache.fd_out : cache.act;
  TensorT<T> dh2 = zeros_like(h2);
  conv2d_backward(h2, p.conv2_w, 1, 0, 1, dy, &dh2, &grads.conv2_w, &grads.conv2_b);

  TensorT<T> dact = (p.kind == FfnKind::kCiFfn)
                        ? fd_backward(dh2, cache.fd, p.fd, grads.fd)
                        : std::move(dh2);

  const TensorT<T>& pre_act = (p.kind != FfnKind::kFfn) ? cache.hdw : cache.h1;
  TensorT<T> dpre = gelu_backward(pre_act, dact);

  TensorT<T> dh1;
  if (p.kind != FfnKind::kFfn) {
    dh1 = zeros_like(cache.h1);
    conv2d_backward(cache.h1, p.dw_w, 1, 1, static_cast<int>(cache.h1.dim(1)), dpre, &dh1,
                    &grads.dw_w, &grads.dw_b);
  } else {
    dh1 = std::move(dpre);
  }

  TensorT<T> dnormed = zeros_like(cache.normed);
  conv2d_backward(cache.normed, p.conv1_w, 1, 0, 1, dh1, &dnormed, &grads.conv1_w, &grads.conv1_b);

  TensorT<T> dx = zeros_like(cache.x);
  layer_norm_backward(cache.x, p.norm.gamma, T(kLayerNormEps), dnormed, &dx, &grads.norm.gamma,
                      &grads.norm.beta);
  add_inplace(dx, dy);  // residual
  return dx;
}

#define SAEVIT_INSTANTIATE_BLOCKS(T)                                                              \
  template void fill_trunc_normal<T>(TensorT<T>&, RngState&, double);                             \
  template void fill_fanout_normal<T>(TensorT<T>&, RngState&, std::int64_t);                      \
  template LayerNormParamsT<T> make_layer_norm<T>(std::int64_t);                                  \
  template ConvStemParamsT<T> make_conv_stem<T>(std::int64_t, RngState&);                         \
  template PatchEmbedParamsT<T> make_patch_embed<T>(std::int64_t, std::int64_t, int, int, int,    \
                                                    RngState&);                                   \
  template LfeParamsT<T> make_lfe<T>(std::int64_t, RngState&);                                    \
  template FdParamsT<T> make_fd<T>(std::int64_t, RngState&);                                      \
  template FfnParamsT<T> make_ffn<T>(FfnKind, std::int64_t, std::int64_t, RngState&);             \
  template TensorT<T> conv_stem_forward<T>(const TensorT<T>&, const ConvStemParamsT<T>&);         \
  template TensorT<T> conv_stem_forward_cached<T>(const TensorT<T>&, const ConvStemParamsT<T>&,   \
                                                  ConvStemCacheT<T>&);                            \
  template TensorT<T> conv_stem_backward<T>(const TensorT<T>&, const ConvStemCacheT<T>&,          \
                                            const ConvStemParamsT<T>&, ConvStemParamsT<T>&);      \
  template TensorT<T> patch_embed_forward<T>(const TensorT<T>&, const PatchEmbedParamsT<T>&);     \
  template TensorT<T> patch_embed_forward_cached<T>(const TensorT<T>&,                            \
                                                    const PatchEmbedParamsT<T>&,                  \
                                                    PatchEmbedCacheT<T>&);                        \
  template TensorT<T> patch_embed_backward<T>(const TensorT<T>&, const PatchEmbedCacheT<T>&,      \
                                              const PatchEmbedParamsT<T>&,                        \
                                              PatchEmbedParamsT<T>&);                             \
  template TensorT<T> lfe_forward<T>(const TensorT<T>&, const LfeParamsT<T>&);                    \
  template TensorT<T> lfe_forward_cached<T>(const TensorT<T>&, const LfeParamsT<T>&,              \
                                            LfeCacheT<T>&);                                       \
  template TensorT<T> lfe_backward<T>(const TensorT<T>&, const LfeCacheT<T>&,                     \
                                      const LfeParamsT<T>&, LfeParamsT<T>&);                      \
  template TensorT<T> fd_forward<T>(const TensorT<T>&, const FdParamsT<T>&);                      \
  template TensorT<T> fd_forward_cached<T>(const TensorT<T>&, const FdParamsT<T>&,                \
                                           FdCacheT<T>&);                                         \
  template TensorT<T> fd_backward<T>(const TensorT<T>&, const FdCacheT<T>&, const FdParamsT<T>&,  \
                                     FdParamsT<T>&);                                              \
  template TensorT<T> ffn_forward<T>(const TensorT<T>&, const FfnParamsT<T>&);                    \
  template TensorT<T> ffn_forward_cached<T>(const TensorT<T>&, const FfnParamsT<T>&,              \
                                            FfnCacheT<T>&);                                       \
  template TensorT<T> ffn_backward<T>(const TensorT<T>&, const FfnCacheT<T>&,                     \
                                      const FfnParamsT<T>&, FfnParamsT<T>&);

SAEVIT_INSTANTIATE_BLOCKS(float)
SAEVIT_INSTANTIATE_BLOCKS(double)

}  // namespace saevit
