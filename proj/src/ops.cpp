#include "saevit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace saevit {

namespace {

template <typename T>
void require_rank(const TensorT<T>& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

std::int64_t conv_out_dim(std::int64_t in, int k, int stride, int pad, const char* axis) {
  const std::int64_t span = in + 2 * pad - k;
  if (span < 0) {
    throw DimensionError(std::string("kernel exceeds padded input along ") + axis + ": " +
                         std::to_string(in) + "+2*" + std::to_string(pad) + " < " +
                         std::to_string(k));
  }
  return span / stride + 1;
}

}  // namespace

// ---------------------------------------------------------------- gemm

template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      T* ci = c + i * n;
      if (!accumulate) std::fill(ci, ci + n, T(0));
      const T* ai = a + i * k;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const T av = ai[kk];
        const T* bk = b + kk * n;
        for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
      }
    }
  });
}

template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b_t, T* c,
             bool accumulate) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* bj = b_t + j * k;
        T acc = 0;
        for (std::int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
        ci[j] = accumulate ? ci[j] + acc : acc;
      }
    }
  });
}

template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a_t, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const T* ak = a_t + kk * m;
    const T* bk = b + kk * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = ak[i];
      if (av == T(0)) continue;
      T* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// ---------------------------------------------------------------- conv2d

namespace {

// col: (Cin*kh*kw, Hout*Wout) for one sample.
template <typename T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, std::int64_t hout, std::int64_t wout, T* col) {
  const std::int64_t plane = h * w;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < cin; ++c) {
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s, ++row) {
        T* dst = col + row * (hout * wout);
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          const std::int64_t ih = oh * stride - pad + r;
          if (ih < 0 || ih >= h) {
            std::fill(dst + oh * wout, dst + (oh + 1) * wout, T(0));
            continue;
          }
          const T* src = x + c * plane + ih * w;
          for (std::int64_t ow = 0; ow < wout; ++ow) {
            const std::int64_t iw = ow * stride - pad + s;
            dst[oh * wout + ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, std::int64_t cin, std::int64_t h, std::int64_t w, int kh, int kw,
                  int stride, int pad, std::int64_t hout, std::int64_t wout, T* x) {
  const std::int64_t plane = h * w;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < cin; ++c) {
    for (int r = 0; r < kh; ++r) {
      for (int s = 0; s < kw; ++s, ++row) {
        const T* src = col + row * (hout * wout);
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          const std::int64_t ih = oh * stride - pad + r;
          if (ih < 0 || ih >= h) continue;
          T* dst = x + c * plane + ih * w;
          for (std::int64_t ow = 0; ow < wout; ++ow) {
            const std::int64_t iw = ow * stride - pad + s;
            if (iw >= 0 && iw < w) dst[iw] += src[oh * wout + ow];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_check(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias, int stride,
                  int pad, int groups) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride < 1 || pad < 0 || groups < 1) throw ConfigError("conv2d: bad stride/pad/groups");
  const std::int64_t cin = x.dim(1), cout = w.dim(0);
  if (cin % groups != 0 || cout % groups != 0) {
    throw DimensionError("conv2d: channels not divisible by groups: Cin=" + std::to_string(cin) +
                         " Cout=" + std::to_string(cout) + " groups=" + std::to_string(groups));
  }
  if (w.dim(1) != cin / groups) {
    throw DimensionError("conv2d: weight Cin axis " + std::to_string(w.dim(1)) +
                         " != input channels/groups " + std::to_string(cin / groups));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw DimensionError("conv2d: bias axis must be (Cout)");
  }
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias, int stride,
                  int pad, int groups) {
  conv2d_check(x, w, bias, stride, pad, groups);
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cout = w.dim(0);
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const std::int64_t hout = conv_out_dim(h, kh, stride, pad, "H");
  const std::int64_t wout = conv_out_dim(ww, kw, stride, pad, "W");

  TensorT<T> y({n, cout, hout, wout});
  const std::int64_t ohw = hout * wout;

  if (groups == 1) {
    std::vector<T> col(static_cast<std::size_t>(cin * kh * kw * ohw));
    for (std::int64_t i = 0; i < n; ++i) {
      im2col(x.ptr() + i * cin * h * ww, cin, h, ww, kh, kw, stride, pad, hout, wout, col.data());
      gemm_nn(cout, ohw, cin * kh * kw, w.ptr(), col.data(), y.ptr() + i * cout * ohw);
    }
  } else if (groups == cin && cout == cin) {
    // Depthwise fast path.
    parallel_for(n * cin, [&](std::int64_t b0, std::int64_t b1) {
      for (std::int64_t bc = b0; bc < b1; ++bc) {
        const T* xp = x.ptr() + bc * h * ww;
        const T* wp = w.ptr() + (bc % cin) * kh * kw;
        T* yp = y.ptr() + bc * ohw;
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          for (std::int64_t ow = 0; ow < wout; ++ow) {
            T acc = 0;
            for (int r = 0; r < kh; ++r) {
              const std::int64_t ih = oh * stride - pad + r;
              if (ih < 0 || ih >= h) continue;
              for (int s = 0; s < kw; ++s) {
                const std::int64_t iw = ow * stride - pad + s;
                if (iw < 0 || iw >= ww) continue;
                acc += xp[ih * ww + iw] * wp[r * kw + s];
              }
            }
            yp[oh * wout + ow] = acc;
          }
        }
      }
    });
  } else {
    const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t co = 0; co < cout; ++co) {
        const std::int64_t g = co / cpg_out;
        T* yp = y.ptr() + (i * cout + co) * ohw;
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          for (std::int64_t ow = 0; ow < wout; ++ow) {
            T acc = 0;
            for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
              const T* xp = x.ptr() + ((i * cin + g * cpg_in + ci) * h) * ww;
              const T* wp = w.ptr() + ((co * cpg_in + ci) * kh) * kw;
              for (int r = 0; r < kh; ++r) {
                const std::int64_t ih = oh * stride - pad + r;
                if (ih < 0 || ih >= h) continue;
                for (int s = 0; s < kw; ++s) {
                  const std::int64_t iw = ow * stride - pad + s;
                  if (iw < 0 || iw >= ww) continue;
                  acc += xp[ih * ww + iw] * wp[r * kw + s];
                }
              }
            }
            yp[oh * wout + ow] = acc;
          }
        }
      }
    }
  }

  if (bias) {
    parallel_for(n * cout, [&](std::int64_t b0, std::int64_t b1) {
      for (std::int64_t bc = b0; bc < b1; ++bc) {
        const T bv = (*bias)[bc % cout];
        T* yp = y.ptr() + bc * ohw;
        for (std::int64_t j = 0; j < ohw; ++j) yp[j] += bv;
      }
    });
  }
  debug_check_finite(y, "conv2d");
  return y;
}

template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad, int groups,
                     const TensorT<T>& dy, TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
  conv2d_check(x, w, static_cast<const TensorT<T>*>(nullptr), stride, pad, groups);
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cout = w.dim(0);
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const std::int64_t hout = dy.dim(2), wout = dy.dim(3);
  const std::int64_t ohw = hout * wout;
  const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;

  if (db) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t co = 0; co < cout; ++co) {
        const T* dyp = dy.ptr() + (i * cout + co) * ohw;
        T acc = 0;
        for (std::int64_t j = 0; j < ohw; ++j) acc += dyp[j];
        (*db)[co] += acc;
      }
    }
  }

  if (groups == 1 && (dx || dw)) {
    std::vector<T> col(static_cast<std::size_t>(cin * kh * kw * ohw));
    std::vector<T> dcol(dx ? col.size() : 0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* dyp = dy.ptr() + i * cout * ohw;
      im2col(x.ptr() + i * cin * h * ww, cin, h, ww, kh, kw, stride, pad, hout, wout, col.data());
      if (dw) {
        // dW (Cout, CKK) += dY (Cout, OHW) * col^T
        gemm_nt(cout, cin * kh * kw, ohw, dyp, col.data(), dw->ptr(), true);
      }
      if (dx) {
        // dcol (CKK, OHW) = W^T (CKK, Cout) * dY
        gemm_tn(cin * kh * kw, ohw, cout, w.ptr(), dyp, dcol.data(), false);
        col2im_accum(dcol.data(), cin, h, ww, kh, kw, stride, pad, hout, wout,
                     dx->ptr() + i * cin * h * ww);
      }
    }
    return;
  }

  // Grouped / depthwise general path.
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const std::int64_t g = co / cpg_out;
      const T* dyp = dy.ptr() + (i * cout + co) * ohw;
      for (std::int64_t oh = 0; oh < hout; ++oh) {
        for (std::int64_t ow = 0; ow < wout; ++ow) {
          const T gv = dyp[oh * wout + ow];
          if (gv == T(0)) continue;
          for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
            const std::int64_t xc = g * cpg_in + ci;
            const T* xp = x.ptr() + ((i * cin + xc) * h) * ww;
            for (int r = 0; r < kh; ++r) {
              const std::int64_t ih = oh * stride - pad + r;
              if (ih < 0 || ih >= h) continue;
              for (int s = 0; s < kw; ++s) {
                const std::int64_t iw = ow * stride - pad + s;
                if (iw < 0 || iw >= ww) continue;
                const std::int64_t widx = ((co * cpg_in + ci) * kh + r) * kw + s;
                if (dw) (*dw)[widx] += xp[ih * ww + iw] * gv;
                if (dx) (*dx)[((i * cin + xc) * h + ih) * ww + iw] += w[widx] * gv;
              }
            }
          }
        }
      }
    }
  }
}

// ------------------------------------------------------- transposed conv

namespace {
template <typename T>
void tconv_check(const TensorT<T>& x, const TensorT<T>& w, int stride, int groups) {
  require_rank(x, 4, "transposed_conv2d input");
  require_rank(w, 4, "transposed_conv2d weight");
  if (stride < 1 || groups < 1) throw ConfigError("transposed_conv2d: bad stride/groups");
  const std::int64_t cin = x.dim(1);
  if (cin % groups != 0) {
    throw DimensionError("transposed_conv2d: input channels " + std::to_string(cin) +
                         " not divisible by groups " + std::to_string(groups));
  }
  if (w.dim(0) != cin) {
    throw DimensionError("transposed_conv2d: weight Cin axis " + std::to_string(w.dim(0)) +
                         " != input channels " + std::to_string(cin));
  }
}
}  // namespace

template <typename T>
TensorT<T> transposed_conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                             int stride, int groups) {
  tconv_check(x, w, stride, groups);
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cpg_out = w.dim(1);
  const std::int64_t cout = cpg_out * groups;
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const std::int64_t hout = (h - 1) * stride + kh;
  const std::int64_t wout = (ww - 1) * stride + kw;
  const std::int64_t cpg_in = cin / groups;
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw DimensionError("transposed_conv2d: bias axis must be (Cout)");
  }

  TensorT<T> y({n, cout, hout, wout});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const std::int64_t g = ci / cpg_in;
      const T* xp = x.ptr() + (i * cin + ci) * h * ww;
      for (std::int64_t co = 0; co < cpg_out; ++co) {
        const std::int64_t oc = g * cpg_out + co;
        T* yp = y.ptr() + (i * cout + oc) * hout * wout;
        const T* wp = w.ptr() + ((ci * cpg_out + co) * kh) * kw;
        for (std::int64_t ih = 0; ih < h; ++ih) {
          for (std::int64_t iw = 0; iw < ww; ++iw) {
            const T xv = xp[ih * ww + iw];
            if (xv == T(0)) continue;
            T* base = yp + (ih * stride) * wout + iw * stride;
            for (int r = 0; r < kh; ++r) {
              for (int s = 0; s < kw; ++s) base[r * wout + s] += xv * wp[r * kw + s];
            }
          }
        }
      }
    }
  }
  if (bias) {
    const std::int64_t ohw = hout * wout;
    for (std::int64_t bc = 0; bc < n * cout; ++bc) {
      const T bv = (*bias)[bc % cout];
      T* yp = y.ptr() + bc * ohw;
      for (std::int64_t j = 0; j < ohw; ++j) yp[j] += bv;
    }
  }
  debug_check_finite(y, "transposed_conv2d");
  return y;
}

template <typename T>
void transposed_conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, int stride, int groups,
                                const TensorT<T>& dy, TensorT<T>* dx, TensorT<T>* dw,
                                TensorT<T>* db) {
  tconv_check(x, w, stride, groups);
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cpg_out = w.dim(1);
  const std::int64_t cout = cpg_out * groups;
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const std::int64_t hout = dy.dim(2), wout = dy.dim(3);
  const std::int64_t cpg_in = cin / groups;

  if (db) {
    const std::int64_t ohw = hout * wout;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t co = 0; co < cout; ++co) {
        const T* dyp = dy.ptr() + (i * cout + co) * ohw;
        T acc = 0;
        for (std::int64_t j = 0; j < ohw; ++j) acc += dyp[j];
        (*db)[co] += acc;
      }
    }
  }
  if (!dx && !dw) return;

  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const std::int64_t g = ci / cpg_in;
      const T* xp = x.ptr() + (i * cin + ci) * h * ww;
      T* dxp = dx ? dx->ptr() + (i * cin + ci) * h * ww : nullptr;
      for (std::int64_t co = 0; co < cpg_out; ++co) {
        const std::int64_t oc = g * cpg_out + co;
        const T* dyp = dy.ptr() + (i * cout + oc) * hout * wout;
        const T* wp = w.ptr() + ((ci * cpg_out + co) * kh) * kw;
        T* dwp = dw ? dw->ptr() + ((ci * cpg_out + co) * kh) * kw : nullptr;
        for (std::int64_t ih = 0; ih < h; ++ih) {
          for (std::int64_t iw = 0; iw < ww; ++iw) {
            const T xv = xp[ih * ww + iw];
            const T* base = dyp + (ih * stride) * wout + iw * stride;
            T acc = 0;
            for (int r = 0; r < kh; ++r) {
              for (int s = 0; s < kw; ++s) {
                const T gv = base[r * wout + s];
                if (dwp) dwp[r * kw + s] += xv * gv;
                acc += wp[r * kw + s] * gv;
              }
            }
            if (dxp) dxp[ih * ww + iw] += acc;
          }
        }
      }
    }
  }
}

// ----------------------------------------------------------- avg pool

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride) {
  require_rank(x, 4, "avg_pool2d input");
  if (k < 1 || stride < 1) throw ConfigError("avg_pool2d: bad kernel/stride");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k > h || k > w) {
    throw DimensionError("avg_pool2d: window " + std::to_string(k) + " exceeds input " +
                         shape_str(x.shape()));
  }
  if (k == stride && (h % stride != 0 || w % stride != 0)) {
    throw DimensionError("avg_pool2d: H,W " + shape_str({h, w}) + " not divisible by stride " +
                         std::to_string(stride));
  }
  const std::int64_t hout = (h - k) / stride + 1;
  const std::int64_t wout = (w - k) / stride + 1;
  TensorT<T> y({n, c, hout, wout});
  const T inv = T(1) / static_cast<T>(k * k);
  parallel_for(n * c, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t bc = b0; bc < b1; ++bc) {
      const T* xp = x.ptr() + bc * h * w;
      T* yp = y.ptr() + bc * hout * wout;
      for (std::int64_t oh = 0; oh < hout; ++oh) {
        for (std::int64_t ow = 0; ow < wout; ++ow) {
          T acc = 0;
          for (int r = 0; r < k; ++r) {
            const T* row = xp + (oh * stride + r) * w + ow * stride;
            for (int s = 0; s < k; ++s) acc += row[s];
          }
          yp[oh * wout + ow] = acc * inv;
        }
      }
    }
  });
  debug_check_finite(y, "avg_pool2d");
  return y;
}

template <typename T>
TensorT<T> avg_pool2d_backward(const TensorT<T>& dy, const Shape& x_shape, int k, int stride) {
  TensorT<T> dx(x_shape);
  const std::int64_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
  const std::int64_t hout = dy.dim(2), wout = dy.dim(3);
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::int64_t bc = 0; bc < n * c; ++bc) {
    const T* dyp = dy.ptr() + bc * hout * wout;
    T* dxp = dx.ptr() + bc * h * w;
    for (std::int64_t oh = 0; oh < hout; ++oh) {
      for (std::int64_t ow = 0; ow < wout; ++ow) {
        const T gv = dyp[oh * wout + ow] * inv;
        for (int r = 0; r < k; ++r) {
          T* row = dxp + (oh * stride + r) * w + ow * stride;
          for (int s = 0; s < k; ++s) row[s] += gv;
        }
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- layer norm

namespace {
template <typename T>
void ln_check(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>* beta) {
  require_rank(x, 4, "layer_norm input");
  const std::int64_t c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || (beta && (beta->rank() != 1 || beta->dim(0) != c))) {
    throw DimensionError("layer_norm: gamma/beta must be (C) with C=" + std::to_string(c));
  }
}
}  // namespace

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps) {
  ln_check(x, gamma, &beta);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = h * w;
  TensorT<T> y(x.shape());
  const T invc = T(1) / static_cast<T>(c);
  parallel_for(n, [&](std::int64_t n0, std::int64_t n1) {
    for (std::int64_t i = n0; i < n1; ++i) {
      const T* xb = x.ptr() + i * c * plane;
      T* yb = y.ptr() + i * c * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        T mean = 0;
        for (std::int64_t ch = 0; ch < c; ++ch) mean += xb[ch * plane + p];
        mean *= invc;
        T var = 0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T d = xb[ch * plane + p] - mean;
          var += d * d;
        }
        var *= invc;
        const T inv_std = T(1) / std::sqrt(var + eps);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T xhat = (xb[ch * plane + p] - mean) * inv_std;
          yb[ch * plane + p] = xhat * gamma[ch] + beta[ch];
        }
      }
    }
  });
  debug_check_finite(y, "layer_norm");
  return y;
}

template <typename T>
void layer_norm_backward(const TensorT<T>& x, const TensorT<T>& gamma, T eps, const TensorT<T>& dy,
                         TensorT<T>* dx, TensorT<T>* dgamma, TensorT<T>* dbeta) {
  ln_check(x, gamma, static_cast<const TensorT<T>*>(nullptr));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = h * w;
  const T invc = T(1) / static_cast<T>(c);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xb = x.ptr() + i * c * plane;
    const T* gb = dy.ptr() + i * c * plane;
    T* dxb = dx ? dx->ptr() + i * c * plane : nullptr;
    for (std::int64_t p = 0; p < plane; ++p) {
      T mean = 0, var = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) mean += xb[ch * plane + p];
      mean *= invc;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T d = xb[ch * plane + p] - mean;
        var += d * d;
      }
      var *= invc;
      const T inv_std = T(1) / std::sqrt(var + eps);
      // dxhat = dy * gamma; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T xhat = (xb[ch * plane + p] - mean) * inv_std;
        const T dxhat = gb[ch * plane + p] * gamma[ch];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        if (dgamma) (*dgamma)[ch] += gb[ch * plane + p] * xhat;
        if (dbeta) (*dbeta)[ch] += gb[ch * plane + p];
      }
      if (dxb) {
        const T m1 = sum_dxhat * invc, m2 = sum_dxhat_xhat * invc;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T xhat = (xb[ch * plane + p] - mean) * inv_std;
          const T dxhat = gb[ch * plane + p] * gamma[ch];
          dxb[ch * plane + p] += inv_std * (dxhat - m1 - xhat * m2);
        }
      }
    }
  }
}

// -------------------------------------------------------------- softmax

namespace {
struct AxisView {
  std::int64_t outer, len, inner;
};
template <typename T>
AxisView axis_view(const TensorT<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  AxisView v{1, x.dim(axis), 1};
  for (int i = 0; i < axis; ++i) v.outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) v.inner *= x.dim(i);
  return v;
}
}  // namespace

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const AxisView v = axis_view(x, axis);
  TensorT<T> y(x.shape());
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const T* xp = x.ptr() + o * v.len * v.inner + in;
      T* yp = y.ptr() + o * v.len * v.inner + in;
      T mx = xp[0];
      for (std::int64_t i = 1; i < v.len; ++i) mx = std::max(mx, xp[i * v.inner]);
      T sum = 0;
      for (std::int64_t i = 0; i < v.len; ++i) {
        const T e = std::exp(xp[i * v.inner] - mx);
        yp[i * v.inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::int64_t i = 0; i < v.len; ++i) yp[i * v.inner] *= inv;
    }
  }
  debug_check_finite(y, "softmax");
  return y;
}

template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& y, const TensorT<T>& dy, int axis) {
  const AxisView v = axis_view(y, axis);
  TensorT<T> dx(y.shape());
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const T* yp = y.ptr() + o * v.len * v.inner + in;
      const T* gp = dy.ptr() + o * v.len * v.inner + in;
      T* dp = dx.ptr() + o * v.len * v.inner + in;
      T dot = 0;
      for (std::int64_t i = 0; i < v.len; ++i) dot += yp[i * v.inner] * gp[i * v.inner];
      for (std::int64_t i = 0; i < v.len; ++i) {
        dp[i * v.inner] = yp[i * v.inner] * (gp[i * v.inner] - dot);
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------------- gelu

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  const std::int64_t n = x.numel();
  const T* xp = x.ptr();
  T* yp = y.ptr();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = xp[i];
    const T t = std::tanh(c * (v + a * v * v * v));
    yp[i] = T(0.5) * v * (T(1) + t);
  }
  debug_check_finite(y, "gelu");
  return y;
}

template <typename T>
TensorT<T> gelu_backward(const TensorT<T>& x, const TensorT<T>& dy) {
  TensorT<T> dx(x.shape());
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T u = c * (v + a * v * v * v);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * a * v * v);
    dx[i] = dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
  }
  return dx;
}

// --------------------------------------------------------------- linear

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias) {
  require_rank(w, 2, "linear weight");
  if (x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(0)) {
    throw DimensionError("linear: trailing input axis " + shape_str(x.shape()) +
                         " != weight Cin " + std::to_string(w.dim(0)));
  }
  const std::int64_t cin = w.dim(0), cout = w.dim(1);
  const std::int64_t m = x.numel() / cin;
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw DimensionError("linear: bias axis must be (Cout)");
  }
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  TensorT<T> y(out_shape);
  gemm_nn(m, cout, cin, x.ptr(), w.ptr(), y.ptr());
  if (bias) {
    for (std::int64_t i = 0; i < m; ++i) {
      T* yp = y.ptr() + i * cout;
      for (std::int64_t j = 0; j < cout; ++j) yp[j] += (*bias)[j];
    }
  }
  debug_check_finite(y, "linear");
  return y;
}

template <typename T>
void linear_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy, TensorT<T>* dx,
                     TensorT<T>* dw, TensorT<T>* db) {
  const std::int64_t cin = w.dim(0), cout = w.dim(1);
  const std::int64_t m = x.numel() / cin;
  if (dx) gemm_nt(m, cin, cout, dy.ptr(), w.ptr(), dx->ptr(), true);
  if (dw) gemm_tn(cin, cout, m, x.ptr(), dy.ptr(), dw->ptr(), true);
  if (db) {
    for (std::int64_t i = 0; i < m; ++i) {
      const T* gp = dy.ptr() + i * cout;
      for (std::int64_t j = 0; j < cout; ++j) (*db)[j] += gp[j];
    }
  }
}

// -------------------------------------------------------- cross entropy

namespace {
template <typename T>
void ce_check(const TensorT<T>& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy logits");
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.dim(0)) + " rows");
  }
  const int k = static_cast<int>(logits.dim(1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
}
}  // namespace

template <typename T>
T cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
  ce_check(logits, labels);
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* lp = logits.ptr() + i * k;
    T mx = lp[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, lp[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < k; ++j) sum += std::exp(lp[j] - mx);
    total += mx + std::log(sum) - lp[labels[static_cast<std::size_t>(i)]];
  }
  return total / static_cast<T>(n);
}

template <typename T>
TensorT<T> cross_entropy_backward(const TensorT<T>& logits, const std::vector<int>& labels) {
  ce_check(logits, labels);
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  TensorT<T> d = softmax(logits, 1);
  const T inv = T(1) / static_cast<T>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    d[i * k + labels[static_cast<std::size_t>(i)]] -= T(1);
    for (std::int64_t j = 0; j < k; ++j) d[i * k + j] *= inv;
  }
  return d;
}

// ------------------------------------------------------- layout helpers

template <typename T>
TensorT<T> nchw_to_tokens(const TensorT<T>& x) {
  require_rank(x, 4, "nchw_to_tokens input");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t l = h * w;
  TensorT<T> t({n, l, c});
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xb = x.ptr() + i * c * l;
    T* tb = t.ptr() + i * l * c;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t p = 0; p < l; ++p) tb[p * c + ch] = xb[ch * l + p];
    }
  }
  return t;
}

template <typename T>
TensorT<T> tokens_to_nchw(const TensorT<T>& t, std::int64_t h, std::int64_t w) {
  require_rank(t, 3, "tokens_to_nchw input");
  const std::int64_t n = t.dim(0), l = t.dim(1), c = t.dim(2);
  if (l != h * w) {
    throw DimensionError("tokens_to_nchw: token count " + std::to_string(l) + " != " +
                         std::to_string(h) + "*" + std::to_string(w));
  }
  TensorT<T> x({n, c, h, w});
  for (std::int64_t i = 0; i < n; ++i) {
    const T* tb = t.ptr() + i * l * c;
    T* xb = x.ptr() + i * c * l;
    for (std::int64_t p = 0; p < l; ++p) {
      for (std::int64_t ch = 0; ch < c; ++ch) xb[ch * l + p] = tb[p * c + ch];
    }
  }
  return x;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  require_rank(x, 4, "global_avg_pool input");
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  TensorT<T> y({n, c});
  const T inv = T(1) / static_cast<T>(plane);
  for (std::int64_t bc = 0; bc < n * c; ++bc) {
    const T* xp = x.ptr() + bc * plane;
    T acc = 0;
    for (std::int64_t p = 0; p < plane; ++p) acc += xp[p];
    y[bc] = acc * inv;
  }
  return y;
}

template <typename T>
TensorT<T> global_avg_pool_backward(const TensorT<T>& dy, const Shape& x_shape) {
  TensorT<T> dx(x_shape);
  const std::int64_t n = x_shape[0], c = x_shape[1], plane = x_shape[2] * x_shape[3];
  const T inv = T(1) / static_cast<T>(plane);
  for (std::int64_t bc = 0; bc < n * c; ++bc) {
    const T gv = dy[bc] * inv;
    T* dxp = dx.ptr() + bc * plane;
    for (std::int64_t p = 0; p < plane; ++p) dxp[p] = gv;
  }
  return dx;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!same_shape(a.shape(), b.shape())) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  TensorT<T> y(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b) {
  if (!same_shape(a.shape(), b.shape())) {
    throw DimensionError("add_inplace: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) a[i] += b[i];
}

// Explicit instantiations: float is the compute path, double the gradcheck path.
#define SAEVIT_INSTANTIATE_OPS(T)                                                                \
  template void gemm_nn<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, T*,    \
                           bool);                                                               \
  template void gemm_nt<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, T*,    \
                           bool);                                                               \
  template void gemm_tn<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, T*,    \
                           bool);                                                               \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>*, int,   \
                                int, int);                                                      \
  template void conv2d_backward<T>(const TensorT<T>&, const TensorT<T>&, int, int, int,         \
                                   const TensorT<T>&, TensorT<T>*, TensorT<T>*, TensorT<T>*);   \
  template TensorT<T> transposed_conv2d<T>(const TensorT<T>&, const TensorT<T>&,                \
                                           const TensorT<T>*, int, int);                        \
  template void transposed_conv2d_backward<T>(const TensorT<T>&, const TensorT<T>&, int, int,   \
                                              const TensorT<T>&, TensorT<T>*, TensorT<T>*,      \
                                              TensorT<T>*);                                     \
  template TensorT<T> avg_pool2d<T>(const TensorT<T>&, int, int);                               \
  template TensorT<T> avg_pool2d_backward<T>(const TensorT<T>&, const Shape&, int, int);        \
  template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                    T);                                                         \
  template void layer_norm_backward<T>(const TensorT<T>&, const TensorT<T>&, T,                 \
                                       const TensorT<T>&, TensorT<T>*, TensorT<T>*,             \
                                       TensorT<T>*);                                            \
  template TensorT<T> softmax<T>(const TensorT<T>&, int);                                       \
  template TensorT<T> softmax_backward<T>(const TensorT<T>&, const TensorT<T>&, int);           \
  template TensorT<T> gelu<T>(const TensorT<T>&);                                               \
  template TensorT<T> gelu_backward<T>(const TensorT<T>&, const TensorT<T>&);                   \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>*);       \
  template void linear_backward<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,     \
                                   TensorT<T>*, TensorT<T>*, TensorT<T>*);                      \
  template T cross_entropy<T>(const TensorT<T>&, const std::vector<int>&);                      \
  template TensorT<T> cross_entropy_backward<T>(const TensorT<T>&, const std::vector<int>&);    \
  template TensorT<T> nchw_to_tokens<T>(const TensorT<T>&);                                     \
  template TensorT<T> tokens_to_nchw<T>(const TensorT<T>&, std::int64_t, std::int64_t);         \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                    \
  template TensorT<T> global_avg_pool_backward<T>(const TensorT<T>&, const Shape&);             \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                             \
  template void add_inplace<T>(TensorT<T>&, const TensorT<T>&);

SAEVIT_INSTANTIATE_OPS(float)
SAEVIT_INSTANTIATE_OPS(double)

}  // namespace saevit
