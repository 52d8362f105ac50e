#pragma once

#include <vector>

#include "saevit/tensor.hpp"

namespace saevit {

// Primitive forward/backward kernels. Composites hand-chain these; there is
// no graph autodiff. Backward outputs are accumulated (+=) into the
// destination tensors, which callers allocate zeroed; pass nullptr to skip.

// ---- GEMM helpers (row-major, packed) ----
// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
             bool accumulate = false);
// C[M,N] (+)= A[M,K] * B^T, B given as (N,K)
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b_t, T* c,
             bool accumulate = false);
// C[M,N] (+)= A^T * B, A given as (K,M)
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a_t, const T* b, T* c,
             bool accumulate = false);

// ---- Convolution (cross-correlation, no kernel flip) ----
// x: (N, Cin, H, W); w: (Cout, Cin/groups, kh, kw); bias: (Cout) or nullptr.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias, int stride,
                  int pad, int groups = 1);
template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, int stride, int pad, int groups,
                     const TensorT<T>& dy, TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db);

// ---- Transposed convolution (zero-insertion upsampling) ----
// x: (N, Cin, H, W); w: (Cin, Cout/groups, kh, kw); Hout = (H-1)*stride + kh.
template <typename T>
TensorT<T> transposed_conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                             int stride, int groups = 1);
template <typename T>
void transposed_conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, int stride, int groups,
                                const TensorT<T>& dy, TensorT<T>* dx, TensorT<T>* dw,
                                TensorT<T>* db);

// ---- Average pooling ----
template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride);
template <typename T>
TensorT<T> avg_pool2d_backward(const TensorT<T>& dy, const Shape& x_shape, int k, int stride);

// ---- Layer norm over the channel axis at each (n,h,w) position ----
// x: (N,C,H,W); gamma/beta: (C). Population variance, eps inside the sqrt.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5));
template <typename T>
void layer_norm_backward(const TensorT<T>& x, const TensorT<T>& gamma, T eps, const TensorT<T>& dy,
                         TensorT<T>* dx, TensorT<T>* dgamma, TensorT<T>* dbeta);

// ---- Softmax along an axis (max-subtracted) ----
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis);
// Takes the forward output y, not x.
template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& y, const TensorT<T>& dy, int axis);

// ---- GELU, tanh approximation ----
template <typename T>
TensorT<T> gelu(const TensorT<T>& x);
template <typename T>
TensorT<T> gelu_backward(const TensorT<T>& x, const TensorT<T>& dy);

// ---- Affine map on the trailing axis ----
// x: (..., Cin); w: (Cin, Cout); bias: (Cout) or nullptr.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias);
template <typename T>
void linear_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy, TensorT<T>* dx,
                     TensorT<T>* dw, TensorT<T>* db);

// ---- Mean negative log-likelihood of the true class ----
template <typename T>
T cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels);
template <typename T>
TensorT<T> cross_entropy_backward(const TensorT<T>& logits, const std::vector<int>& labels);

// ---- Layout / reduction helpers ----
template <typename T>
TensorT<T> nchw_to_tokens(const TensorT<T>& x);  // (N,C,H,W) -> (N,H*W,C)
template <typename T>
TensorT<T> tokens_to_nchw(const TensorT<T>& t, std::int64_t h, std::int64_t w);
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x);  // (N,C,H,W) -> (N,C)
template <typename T>
TensorT<T> global_avg_pool_backward(const TensorT<T>& dy, const Shape& x_shape);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b);

}  // namespace saevit
