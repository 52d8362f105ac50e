#include <cmath>
#include <cstring>

#include "doctest.h"
#include "saevit/blocks.hpp"
#include "saevit/gradcheck.hpp"
#include "saevit/rng.hpp"

using namespace saevit;

namespace {

template <typename T>
TensorT<T> random_tensor(Shape shape, RngState& rng, double scale = 1.0) {
  TensorT<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * scale);
  return t;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), sizeof(T) * static_cast<std::size_t>(a.numel())) == 0;
}

template <typename P>
std::int64_t param_scalars(P& p) {
  std::int64_t n = 0;
  visit_params(p, "x", [&](const std::string&, auto& t) { n += t.numel(); });
  return n;
}

}  // namespace

TEST_CASE("conv stem halves the resolution") {
  RngState rng(1);
  auto p = make_conv_stem<float>(24, rng);
  Tensor x = random_tensor<float>({1, 3, 224, 224}, rng, 0.5);
  Tensor y = conv_stem_forward(x, p);
  CHECK(y.shape() == Shape{1, 24, 112, 112});

  Tensor odd({1, 3, 7, 8});
  CHECK_THROWS_AS(conv_stem_forward(odd, p), DimensionError);
}

TEST_CASE("conv stem with zero weights emits a constant zero map") {
  RngState rng(2);
  auto p = make_conv_stem<float>(8, rng);
  for (Tensor* t : {&p.conv0_w, &p.conv0_b, &p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b}) {
    std::fill(t->data().begin(), t->data().end(), 0.f);
  }
  Tensor x = random_tensor<float>({1, 3, 16, 16}, rng);
  Tensor y = conv_stem_forward(x, p);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.f);
}

TEST_CASE("conv stem parameter count matches the closed form") {
  RngState rng(3);
  auto p = make_conv_stem<float>(24, rng);
  // 3*3*3*24+24 + 2*(3*3*24*24+24) + three norm affine pairs
  const std::int64_t expected = (3 * 3 * 3 * 24 + 24) + 2 * (3 * 3 * 24 * 24 + 24) + 3 * 2 * 24;
  CHECK(param_scalars(p) == expected);
  CHECK(expected == 11232);
  CHECK(p.conv0_w.numel() + p.conv0_b.numel() == 672);  // single 3x3 conv, 3->24, with bias
}

TEST_CASE("patch embedding halves and re-normalizes") {
  RngState rng(4);
  auto p1 = make_patch_embed<float>(24, 48, 3, 2, 1, rng);
  Tensor x = random_tensor<float>({1, 24, 112, 112}, rng, 0.5);
  Tensor y = patch_embed_forward(x, p1);
  CHECK(y.shape() == Shape{1, 48, 56, 56});

  auto p2 = make_patch_embed<float>(48, 96, 3, 2, 1, rng);
  CHECK(patch_embed_forward(y, p2).shape() == Shape{1, 96, 28, 28});

  // the block is exactly norm-after-conv
  Tensor conv_out = conv2d(x, p1.conv_w, &p1.conv_b, 2, 1);
  Tensor composed = layer_norm(conv_out, p1.norm.gamma, p1.norm.beta, kLayerNormEps);
  CHECK(bitwise_equal(y, composed));

  Tensor odd({1, 24, 7, 7});
  CHECK_THROWS_AS(patch_embed_forward(odd, p1), DimensionError);
}

TEST_CASE("lfe is the identity when the depthwise kernel is zero") {
  RngState rng(5);
  auto p = make_lfe<float>(6, rng);
  std::fill(p.dw_w.data().begin(), p.dw_w.data().end(), 0.f);
  std::fill(p.dw_b.data().begin(), p.dw_b.data().end(), 0.f);
  Tensor x = random_tensor<float>({2, 6, 5, 5}, rng);
  CHECK(bitwise_equal(lfe_forward(x, p), x));
}

TEST_CASE("lfe preserves shape and stays inside its parameter budget") {
  RngState rng(6);
  auto p = make_lfe<float>(96, rng);
  Tensor x = random_tensor<float>({2, 96, 28, 28}, rng);
  CHECK(lfe_forward(x, p).shape() == x.shape());

  auto p192 = make_lfe<float>(192, rng);
  CHECK(param_scalars(p192) == 9 * 192 + 192);
  CHECK(param_scalars(p192) <= 11 * 192);  // budget guard

  Tensor bad({1, 7, 4, 4});
  CHECK_THROWS_AS(lfe_forward(bad, p), DimensionError);
}

TEST_CASE("feature decomposition is the identity at init") {
  RngState rng(7);
  auto p = make_fd<float>(5, rng);  // scale starts at zero
  Tensor x = random_tensor<float>({2, 5, 4, 4}, rng);
  CHECK(bitwise_equal(fd_forward(x, p), x));

  // scale 1 and zero conv: y = 1*(x+0)+x = 2x
  std::fill(p.scale.data().begin(), p.scale.data().end(), 1.f);
  std::fill(p.conv_w.data().begin(), p.conv_w.data().end(), 0.f);
  std::fill(p.conv_b.data().begin(), p.conv_b.data().end(), 0.f);
  Tensor y = fd_forward(x, p);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(2.f * x[i]));
}

TEST_CASE("feature decomposition matches the scalar-loop oracle") {
  RngState rng(8);
  auto p = make_fd<double>(4, rng);
  for (std::int64_t i = 0; i < p.scale.numel(); ++i) p.scale[i] = rng.normal();
  Tensor64 x = random_tensor<double>({2, 4, 5, 5}, rng);
  Tensor64 y = fd_forward(x, p);

  Tensor64 conv = conv2d(x, p.conv_w, &p.conv_b, 1, 1, 4);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 4; ++c)
      for (std::int64_t h = 0; h < 5; ++h)
        for (std::int64_t w = 0; w < 5; ++w) {
          const double want = p.scale[c] * (x.at(n, c, h, w) + conv.at(n, c, h, w)) + x.at(n, c, h, w);
          CHECK(std::abs(y.at(n, c, h, w) - want) < 1e-6);
        }
}

TEST_CASE("ciffn with zero scale collapses onto its depthwise-separable path") {
  RngState rng(9);
  auto ci = make_ffn<float>(FfnKind::kCiFfn, 6, 12, rng);
  // same weights into a dwsffn bundle; y_c stays zero
  FfnParamsT<float> dws;
  dws.kind = FfnKind::kDwsFfn;
  dws.norm = ci.norm;
  dws.conv1_w = ci.conv1_w;
  dws.conv1_b = ci.conv1_b;
  dws.dw_w = ci.dw_w;
  dws.dw_b = ci.dw_b;
  dws.conv2_w = ci.conv2_w;
  dws.conv2_b = ci.conv2_b;
  Tensor x = random_tensor<float>({2, 6, 4, 4}, rng);
  CHECK(bitwise_equal(ffn_forward(x, ci), ffn_forward(x, dws)));
}

TEST_CASE("every ffn variant reduces to the residual with zero conv2") {
  RngState rng(10);
  Tensor x = random_tensor<float>({1, 6, 4, 4}, rng);
  for (FfnKind kind : {FfnKind::kFfn, FfnKind::kDwsFfn, FfnKind::kCiFfn}) {
    auto p = make_ffn<float>(kind, 6, 12, rng);
    std::fill(p.conv2_w.data().begin(), p.conv2_w.data().end(), 0.f);
    std::fill(p.conv2_b.data().begin(), p.conv2_b.data().end(), 0.f);
    CHECK(bitwise_equal(ffn_forward(x, p), x));
    CHECK(ffn_forward(x, p).shape() == x.shape());
  }
}

TEST_CASE("ciffn matches a step-by-step composition of the primitive ops") {
  RngState rng(11);
  auto p = make_ffn<double>(FfnKind::kCiFfn, 48, 192, rng);
  for (std::int64_t i = 0; i < p.fd.scale.numel(); ++i) p.fd.scale[i] = rng.normal() * 0.3;
  Tensor64 x = random_tensor<double>({1, 48, 8, 8}, rng);

  Tensor64 normed = layer_norm(x, p.norm.gamma, p.norm.beta, 1e-5);
  Tensor64 h1 = conv2d(normed, p.conv1_w, &p.conv1_b, 1, 0);
  Tensor64 hdw = conv2d(h1, p.dw_w, &p.dw_b, 1, 1, 192);
  Tensor64 act = gelu(hdw);
  Tensor64 conv = conv2d(act, p.fd.conv_w, &p.fd.conv_b, 1, 1, 192);
  Tensor64 fd(act.shape());
  for (std::int64_t n = 0; n < 1; ++n)
    for (std::int64_t c = 0; c < 192; ++c)
      for (std::int64_t pos = 0; pos < 64; ++pos) {
        const std::int64_t idx = (n * 192 + c) * 64 + pos;
        fd[idx] = p.fd.scale[c] * (act[idx] + conv[idx]) + act[idx];
      }
  Tensor64 expect = conv2d(fd, p.conv2_w, &p.conv2_b, 1, 0);
  add_inplace(expect, x);

  CHECK(max_abs_diff(ffn_forward(x, p), expect) < 1e-6);
}

TEST_CASE("the channel scale actually learns") {
  RngState rng(12);
  auto p = make_ffn<float>(FfnKind::kCiFfn, 6, 12, rng);
  Tensor x = random_tensor<float>({1, 6, 4, 4}, rng);
  FfnCacheT<float> cache;
  Tensor y = ffn_forward_cached(x, p, cache);
  auto grads = zeros_like(p);
  Tensor dy = Tensor::full(y.shape(), 1.f);
  ffn_backward(dy, cache, p, grads);
  double norm = 0;
  for (std::int64_t i = 0; i < grads.fd.scale.numel(); ++i) {
    norm += std::abs(grads.fd.scale[i]);
  }
  CHECK(norm > 1e-6);
}

TEST_CASE("block gradients agree with central differences") {
  for (const char* target : {"stem", "patch-embed", "lfe", "fd", "ffn", "dwsffn", "ciffn"}) {
    const auto result = run_grad_check_target(target, 21);
    INFO(target, " worst tensor ", result.worst_tensor);
    CHECK(result.worst < 1e-6);
  }
}
