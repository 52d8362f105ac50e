#include <cmath>

#include "doctest.h"
#include "saevit/ops.hpp"
#include "saevit/rng.hpp"

using namespace saevit;

namespace {

template <typename T>
TensorT<T> random_tensor(Shape shape, RngState& rng, double scale = 1.0) {
  TensorT<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * scale);
  return t;
}

// Direct six-nested-loop cross-correlation, independent of the im2col path.
template <typename T>
TensorT<T> conv2d_oracle(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b, int stride,
                         int pad, int groups) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t hout = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wout = (ww + 2 * pad - kw) / stride + 1;
  const std::int64_t cpg_in = cin / groups, cpg_out = cout / groups;
  TensorT<T> y({n, cout, hout, wout});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oh = 0; oh < hout; ++oh)
        for (std::int64_t ow = 0; ow < wout; ++ow) {
          double acc = b ? static_cast<double>((*b)[co]) : 0.0;
          const std::int64_t g = co / cpg_out;
          for (std::int64_t ci = 0; ci < cpg_in; ++ci)
            for (std::int64_t r = 0; r < kh; ++r)
              for (std::int64_t s = 0; s < kw; ++s) {
                const std::int64_t ih = oh * stride - pad + r;
                const std::int64_t iw = ow * stride - pad + s;
                if (ih < 0 || ih >= h || iw < 0 || iw >= ww) continue;
                acc += static_cast<double>(x.at(i, g * cpg_in + ci, ih, iw)) *
                       static_cast<double>(w.at(co, ci, r, s));
              }
          y.at(i, co, oh, ow) = static_cast<T>(acc);
        }
  return y;
}

// Zero-insertion upsampling followed by plain convolution.
template <typename T>
TensorT<T> tconv_oracle(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b, int stride,
                        int groups) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cpg_out = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::int64_t cout = cpg_out * groups;
  // insert stride-1 zeros between elements, pad by k-1 on every side
  const std::int64_t hz = (h - 1) * stride + 1 + 2 * (kh - 1);
  const std::int64_t wz = (ww - 1) * stride + 1 + 2 * (kw - 1);
  TensorT<T> z({n, cin, hz, wz});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < cin; ++c)
      for (std::int64_t ih = 0; ih < h; ++ih)
        for (std::int64_t iw = 0; iw < ww; ++iw)
          z.at(i, c, ih * stride + kh - 1, iw * stride + kw - 1) = x.at(i, c, ih, iw);
  // correlate with the 180-degree flipped kernel, swapping in/out channel roles
  TensorT<T> wf({cout, cin / groups, kh, kw});
  const std::int64_t cpg_in = cin / groups;
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (std::int64_t co = 0; co < cpg_out; ++co)
      for (std::int64_t r = 0; r < kh; ++r)
        for (std::int64_t s = 0; s < kw; ++s) {
          const std::int64_t g = ci / cpg_in;
          wf.at(g * cpg_out + co, ci % cpg_in, kh - 1 - r, kw - 1 - s) = w.at(ci, co, r, s);
        }
  TensorT<T> y = conv2d_oracle(z, wf, static_cast<const TensorT<T>*>(nullptr), 1, 0, groups);
  if (b) {
    for (std::int64_t i = 0; i < y.dim(0); ++i)
      for (std::int64_t co = 0; co < cout; ++co)
        for (std::int64_t p = 0; p < y.dim(2) * y.dim(3); ++p)
          y.ptr()[(i * cout + co) * y.dim(2) * y.dim(3) + p] += (*b)[co];
  }
  return y;
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

}  // namespace

TEST_CASE("conv2d identity and constant kernels") {
  RngState rng(1);
  Tensor x = random_tensor<float>({1, 1, 4, 4}, rng);
  Tensor w({1, 1, 1, 1}, {1.f});
  Tensor y = conv2d(x, w, nullptr, 1, 0);
  CHECK(max_abs_diff(y, x) == 0.0);

  Tensor xc = Tensor::full({1, 1, 5, 5}, 2.5f);
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.f);
  Tensor yc = conv2d(xc, ones, nullptr, 1, 0);
  REQUIRE(yc.shape() == Shape{1, 1, 3, 3});
  for (std::int64_t i = 0; i < yc.numel(); ++i) CHECK(yc[i] == doctest::Approx(9 * 2.5f));
}

TEST_CASE("conv2d matches the direct summation oracle") {
  RngState rng(2);
  Tensor64 x = random_tensor<double>({1, 2, 5, 5}, rng);
  Tensor64 w = random_tensor<double>({3, 2, 3, 3}, rng);
  Tensor64 b = random_tensor<double>({3}, rng);
  CHECK(max_abs_diff(conv2d(x, w, &b, 2, 1), conv2d_oracle(x, w, &b, 2, 1, 1)) < 1e-6);

  // f32 path, same fixture
  Tensor xf = Tensor::cast_from(x), wf = Tensor::cast_from(w), bf = Tensor::cast_from(b);
  CHECK(max_abs_diff(conv2d(xf, wf, &bf, 2, 1), conv2d_oracle(xf, wf, &bf, 2, 1, 1)) < 1e-4);

  // grouped + depthwise paths
  Tensor64 xg = random_tensor<double>({2, 6, 5, 5}, rng);
  Tensor64 wg = random_tensor<double>({4, 3, 3, 3}, rng);
  CHECK(max_abs_diff(conv2d(xg, wg, nullptr, 1, 1, 2), conv2d_oracle(xg, wg, nullptr, 1, 1, 2)) <
        1e-9);
  Tensor64 wd = random_tensor<double>({6, 1, 3, 3}, rng);
  CHECK(max_abs_diff(conv2d(xg, wd, nullptr, 1, 1, 6), conv2d_oracle(xg, wd, nullptr, 1, 1, 6)) <
        1e-9);
}

TEST_CASE("conv2d dimension errors name the offending axes") {
  Tensor x({1, 3, 4, 4});
  Tensor w({4, 2, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(x, w, nullptr, 1, 1), doctest::Contains("Cin"), DimensionError);
  Tensor w2({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w2, nullptr, 1, 1, 2), DimensionError);  // 3 % 2 != 0
  Tensor wbig({1, 3, 9, 9});
  CHECK_THROWS_AS(conv2d(x, wbig, nullptr, 1, 0), DimensionError);
}

TEST_CASE("transposed conv scatters a single element") {
  Tensor x({1, 1, 1, 1}, {2.f});
  Tensor w({1, 1, 2, 2}, {1.f, 0.f, 0.f, 1.f});
  Tensor y = transposed_conv2d(x, w, nullptr, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y[0] == 2.f);
  CHECK(y[1] == 0.f);
  CHECK(y[2] == 0.f);
  CHECK(y[3] == 2.f);
}

TEST_CASE("transposed conv restores the 56x56 stage geometry") {
  RngState rng(3);
  const std::int64_t c = 5;
  Tensor x = random_tensor<float>({1, c, 7, 7}, rng);
  Tensor w = random_tensor<float>({c, 1, 8, 8}, rng);
  Tensor y = transposed_conv2d(x, w, nullptr, 8, static_cast<int>(c));
  CHECK(y.shape() == Shape{1, c, 56, 56});
}

TEST_CASE("transposed conv equals zero-insertion plus convolution") {
  RngState rng(4);
  Tensor64 x = random_tensor<double>({1, 4, 3, 3}, rng);
  Tensor64 w = random_tensor<double>({4, 1, 2, 2}, rng);
  Tensor64 b = random_tensor<double>({4}, rng);
  CHECK(max_abs_diff(transposed_conv2d(x, w, &b, 2, 4), tconv_oracle(x, w, &b, 2, 4)) < 1e-6);

  // groups == 1, k == stride
  Tensor64 x1 = random_tensor<double>({2, 3, 4, 4}, rng);
  Tensor64 w1 = random_tensor<double>({3, 2, 2, 2}, rng);
  CHECK(max_abs_diff(transposed_conv2d(x1, w1, nullptr, 2, 1), tconv_oracle(x1, w1, nullptr, 2, 1)) <
        1e-6);

  // f32 within the spec tolerance
  Tensor xf = Tensor::cast_from(x), wf = Tensor::cast_from(w), bf = Tensor::cast_from(b);
  CHECK(max_abs_diff(transposed_conv2d(xf, wf, &bf, 2, 4), tconv_oracle(xf, wf, &bf, 2, 4)) < 1e-6);

  Tensor xg({1, 3, 2, 2});
  Tensor wg({3, 1, 2, 2});
  CHECK_THROWS_AS(transposed_conv2d(xg, wg, nullptr, 2, 2), DimensionError);  // 3 % 2 != 0
}

TEST_CASE("avg pool basics") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = avg_pool2d(x, 2, 2);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(2.5f));

  RngState rng(5);
  Tensor r = random_tensor<float>({1, 3, 6, 6}, rng);
  CHECK(max_abs_diff(avg_pool2d(r, 1, 1), r) == 0.0);

  Tensor big({1, 3, 56, 56});
  CHECK(avg_pool2d(big, 8, 8).shape() == Shape{1, 3, 7, 7});

  Tensor small({1, 1, 3, 3});
  CHECK_THROWS_AS(avg_pool2d(small, 4, 4), DimensionError);
  CHECK_THROWS_AS(avg_pool2d(small, 2, 2), DimensionError);  // 3 % 2 != 0 with k == stride
}

TEST_CASE("avg pool then matching deconv restores the input shape") {
  RngState rng(6);
  for (int sr : {1, 2, 4, 8}) {
    Tensor x = random_tensor<float>({1, 3, 8 * sr, 8 * sr}, rng);
    Tensor pooled = avg_pool2d(x, sr, sr);
    Tensor up;
    if (sr == 1) {
      up = pooled;
    } else {
      Tensor w = random_tensor<float>({3, 1, sr, sr}, rng);
      up = transposed_conv2d(pooled, w, nullptr, sr, 3);
    }
    CHECK(up.shape() == x.shape());
  }
}

TEST_CASE("layer norm normalizes the channel vector at each position") {
  Tensor gamma = Tensor::full({4}, 1.f);
  Tensor beta({4});

  Tensor flat = Tensor::full({1, 4, 2, 2}, 3.f);  // constant across channels
  Tensor y = layer_norm(flat, gamma, beta);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(0.f));

  Tensor two({1, 2, 1, 1}, {0.f, 2.f});
  Tensor g2 = Tensor::full({2}, 1.f), b2({2});
  Tensor y2 = layer_norm(two, g2, b2);
  CHECK(y2[0] == doctest::Approx(-1.f).epsilon(1e-4));
  CHECK(y2[1] == doctest::Approx(1.f).epsilon(1e-4));

  RngState rng(7);
  Tensor r = random_tensor<float>({2, 16, 3, 3}, rng);
  Tensor g16 = Tensor::full({16}, 1.f), b16({16});
  Tensor yr = layer_norm(r, g16, b16);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t p = 0; p < 9; ++p) {
      double mean = 0, var = 0;
      for (std::int64_t c = 0; c < 16; ++c) mean += yr.at(n, c, p / 3, p % 3);
      mean /= 16;
      for (std::int64_t c = 0; c < 16; ++c) {
        const double d = yr.at(n, c, p / 3, p % 3) - mean;
        var += d * d;
      }
      var /= 16;
      CHECK(std::abs(mean) < 1e-4);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }

  Tensor gshort = Tensor::full({3}, 1.f);
  CHECK_THROWS_AS(layer_norm(r, gshort, b16), DimensionError);
}

TEST_CASE("softmax rows") {
  Tensor u = Tensor::full({1, 5}, 0.7f);
  Tensor yu = softmax(u, 1);
  for (std::int64_t i = 0; i < 5; ++i) CHECK(yu[i] == doctest::Approx(0.2f));

  Tensor x({1, 2}, {0.f, std::log(2.f)});
  Tensor y = softmax(x, 1);
  CHECK(y[0] == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(2.0 / 3).epsilon(1e-6));

  Tensor big({1, 3}, {1e4f, 0.f, -1e4f});
  Tensor yb = softmax(big, 1);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(std::isfinite(yb[i]));
  CHECK(yb[0] == doctest::Approx(1.f));

  RngState rng(8);
  Tensor r({2, 3, 4});
  for (std::int64_t i = 0; i < r.numel(); ++i) r[i] = static_cast<float>(rng.normal() * 3);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor s = softmax(r, axis);
    // sums along the axis must be 1 within 1e-6
    const std::int64_t len = r.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= r.dim(i);
    for (int i = axis + 1; i < 3; ++i) inner *= r.dim(i);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (std::int64_t l = 0; l < len; ++l) sum += s[o * len * inner + l * inner + in];
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("gelu asymptotes") {
  Tensor x({3}, {0.f, 10.f, -10.f});
  Tensor y = gelu(x);
  CHECK(y[0] == 0.f);
  CHECK(y[1] == doctest::Approx(10.f).epsilon(1e-4));
  CHECK(std::abs(y[2]) < 1e-4);
}

TEST_CASE("linear") {
  RngState rng(9);
  Tensor x = random_tensor<float>({2, 4}, rng);
  Tensor eye({4, 4});
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.f;
  CHECK(max_abs_diff(linear(x, eye, nullptr), x) == 0.0);

  Tensor w = random_tensor<float>({4, 3}, rng);
  Tensor b = random_tensor<float>({3}, rng);
  Tensor basis({1, 4});
  basis[2] = 1.f;
  Tensor yb = linear(basis, w, &b);
  for (int j = 0; j < 3; ++j) CHECK(yb[j] == doctest::Approx(w.at(2, j) + b[j]));

  // nested-loop oracle, f64
  Tensor64 x64 = random_tensor<double>({3, 2, 5}, rng);
  Tensor64 w64 = random_tensor<double>({5, 4}, rng);
  Tensor64 b64 = random_tensor<double>({4}, rng);
  Tensor64 y = linear(x64, w64, &b64);
  for (std::int64_t m = 0; m < 6; ++m)
    for (std::int64_t j = 0; j < 4; ++j) {
      double acc = b64[j];
      for (std::int64_t k = 0; k < 5; ++k) acc += x64[m * 5 + k] * w64.at(k, j);
      CHECK(std::abs(y[m * 4 + j] - acc) < 1e-6);
    }

  Tensor wbad({5, 3});
  CHECK_THROWS_AS(linear(x, wbad, nullptr), DimensionError);
}

TEST_CASE("cross entropy") {
  Tensor uniform({2, 4});
  const float ln4 = std::log(4.f);
  CHECK(cross_entropy(uniform, {0, 3}) == doctest::Approx(ln4).epsilon(1e-5));

  Tensor onehot({1, 3}, {50.f, 0.f, 0.f});
  CHECK(cross_entropy(onehot, {0}) == doctest::Approx(0.f).epsilon(1e-6));

  RngState rng(10);
  Tensor64 logits = random_tensor<double>({4, 5}, rng, 2.0);
  std::vector<int> labels{1, 0, 4, 2};
  // independent log-sum-exp oracle
  double expect = 0;
  for (std::int64_t i = 0; i < 4; ++i) {
    double mx = logits.at(i, 0);
    for (std::int64_t j = 1; j < 5; ++j) mx = std::max(mx, logits.at(i, j));
    double lse = 0;
    for (std::int64_t j = 0; j < 5; ++j) lse += std::exp(logits.at(i, j) - mx);
    expect += mx + std::log(lse) - logits.at(i, labels[static_cast<std::size_t>(i)]);
  }
  expect /= 4;
  CHECK(std::abs(cross_entropy(logits, labels) - expect) < 1e-6);

  CHECK_THROWS_AS(cross_entropy(logits, {1, 0, 5, 2}), InputError);
  CHECK_THROWS_AS(cross_entropy(logits, {1, 0, -1, 2}), InputError);
}

TEST_CASE("token layout round trip") {
  RngState rng(11);
  Tensor x = random_tensor<float>({2, 5, 3, 4}, rng);
  Tensor t = nchw_to_tokens(x);
  REQUIRE(t.shape() == Shape{2, 12, 5});
  CHECK(max_abs_diff(tokens_to_nchw(t, 3, 4), x) == 0.0);
  CHECK(t.at(0, 1, 2) == x.at(0, 2, 0, 1));  // token p = h*W+w ordering
}
