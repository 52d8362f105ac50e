#include "saevit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "saevit/attention.hpp"
#include "saevit/blocks.hpp"
#include "saevit/model.hpp"
#include "saevit/ops.hpp"
#include "saevit/rng.hpp"

namespace saevit {

namespace {

double dot_loss(const Tensor64& w, const Tensor64& y) {
  double acc = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) acc += w[i] * y[i];
  return acc;
}

Tensor64 random_tensor(Shape shape, RngState& rng, double scale = 1.0) {
  Tensor64 t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor64()>& forward,
                           const std::function<NamedGrads(const Tensor64&)>& backward,
                           const std::vector<std::pair<std::string, Tensor64*>>& tensors,
                           double eps, std::int64_t subsample, std::uint64_t seed) {
  Tensor64 y0 = forward();
  RngState wrng(seed);
  Tensor64 w(y0.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = wrng.uniform() * 2.0 - 1.0;

  NamedGrads analytic_list = backward(w);
  std::map<std::string, const Tensor64*> analytic;
  for (const auto& [name, g] : analytic_list) analytic[name] = &g;

  GradCheckResult result;
  RngState pick(seed + 1);
  for (const auto& [name, tensor] : tensors) {
    auto it = analytic.find(name);
    if (it == analytic.end()) {
      throw VerificationError("grad_check: backward produced no gradient for " + name);
    }
    const Tensor64& a = *it->second;
    if (!same_shape(a.shape(), tensor->shape())) {
      throw VerificationError("grad_check: gradient shape mismatch for " + name);
    }
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      if (!std::isfinite(a[i])) {
        throw VerificationError("grad_check: non-finite analytic gradient in " + name);
      }
    }
    std::vector<std::int64_t> idx;
    const std::int64_t n = tensor->numel();
    if (n <= subsample) {
      idx.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    } else {
      // seeded sample without replacement
      std::vector<std::int64_t> all(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
      for (std::int64_t i = 0; i < subsample; ++i) {
        const std::int64_t j = i + pick.uniform_int(n - i);
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      }
      idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(subsample));
    }

    GradCheckEntry entry{name, 0.0, static_cast<std::int64_t>(idx.size())};
    for (const std::int64_t i : idx) {
      const double old = (*tensor)[i];
      (*tensor)[i] = old + eps;
      const double lp = dot_loss(w, forward());
      (*tensor)[i] = old - eps;
      const double lm = dot_loss(w, forward());
      (*tensor)[i] = old;
      const double numeric = (lp - lm) / (2.0 * eps);
      if (!std::isfinite(numeric)) {
        throw VerificationError("grad_check: non-finite numeric gradient in " + name);
      }
      const double av = a[i];
      const double rel = std::abs(av - numeric) / (std::abs(av) + std::abs(numeric) + 1e-12);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    if (entry.max_rel_err >= result.worst) {
      result.worst = entry.max_rel_err;
      result.worst_tensor = name;
    }
    result.entries.push_back(std::move(entry));
  }
  return result;
}

// ------------------------------------------------------------- fixtures

namespace {

using Fixture = std::function<GradCheckResult(std::uint64_t)>;

// Collects (name -> grads tensor) out of a params-shaped grads struct.
template <typename P>
NamedGrads collect_named(P& grads, const std::string& prefix) {
  NamedGrads out;
  visit_params(grads, prefix, [&](const std::string& name, Tensor64& t) {
    out.emplace_back(name, t);
  });
  return out;
}

template <typename P>
std::vector<std::pair<std::string, Tensor64*>> collect_ptrs(P& params, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor64*>> out;
  visit_params(params, prefix, [&](const std::string& name, Tensor64& t) {
    out.emplace_back(name, &t);
  });
  return out;
}

GradCheckResult check_conv2d(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({2, 3, 5, 5}, rng);
  Tensor64 w = random_tensor({4, 3, 3, 3}, rng, 0.5);
  Tensor64 b = random_tensor({4}, rng, 0.1);
  auto forward = [&] { return conv2d(x, w, &b, 2, 1); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dw = zeros_like(w), db = zeros_like(b);
    conv2d_backward(x, w, 2, 1, 1, lw, &dx, &dw, &db);
    return NamedGrads{{"x", dx}, {"w", dw}, {"b", db}};
  };
  return grad_check(forward, backward, {{"x", &x}, {"w", &w}, {"b", &b}});
}

GradCheckResult check_conv2d_grouped(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({1, 6, 5, 5}, rng);
  Tensor64 w = random_tensor({4, 3, 3, 3}, rng, 0.5);  // groups=2
  Tensor64 b = random_tensor({4}, rng, 0.1);
  auto forward = [&] { return conv2d(x, w, &b, 1, 1, 2); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dw = zeros_like(w), db = zeros_like(b);
    conv2d_backward(x, w, 1, 1, 2, lw, &dx, &dw, &db);
    return NamedGrads{{"x", dx}, {"w", dw}, {"b", db}};
  };
  return grad_check(forward, backward, {{"x", &x}, {"w", &w}, {"b", &b}});
}

GradCheckResult check_tconv(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({1, 4, 3, 3}, rng);
  Tensor64 w = random_tensor({4, 1, 2, 2}, rng, 0.5);  // depthwise k=stride=2
  Tensor64 b = random_tensor({4}, rng, 0.1);
  auto forward = [&] { return transposed_conv2d(x, w, &b, 2, 4); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dw = zeros_like(w), db = zeros_like(b);
    transposed_conv2d_backward(x, w, 2, 4, lw, &dx, &dw, &db);
    return NamedGrads{{"x", dx}, {"w", dw}, {"b", db}};
  };
  return grad_check(forward, backward, {{"x", &x}, {"w", &w}, {"b", &b}});
}

GradCheckResult check_avg_pool(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({2, 3, 6, 6}, rng);
  auto forward = [&] { return avg_pool2d(x, 2, 2); };
  auto backward = [&](const Tensor64& lw) {
    return NamedGrads{{"x", avg_pool2d_backward(lw, x.shape(), 2, 2)}};
  };
  return grad_check(forward, backward, {{"x", &x}});
}

GradCheckResult check_layer_norm(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({2, 5, 3, 3}, rng);
  Tensor64 gamma = random_tensor({5}, rng, 0.5);
  Tensor64 beta = random_tensor({5}, rng, 0.5);
  auto forward = [&] { return layer_norm(x, gamma, beta, 1e-5); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dg = zeros_like(gamma), db = zeros_like(beta);
    layer_norm_backward(x, gamma, 1e-5, lw, &dx, &dg, &db);
    return NamedGrads{{"x", dx}, {"gamma", dg}, {"beta", db}};
  };
  return grad_check(forward, backward, {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}});
}

GradCheckResult check_softmax(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({3, 7}, rng);
  auto forward = [&] { return softmax(x, 1); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 y = softmax(x, 1);
    return NamedGrads{{"x", softmax_backward(y, lw, 1)}};
  };
  return grad_check(forward, backward, {{"x", &x}});
}

GradCheckResult check_gelu(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({4, 9}, rng, 2.0);
  auto forward = [&] { return gelu(x); };
  auto backward = [&](const Tensor64& lw) { return NamedGrads{{"x", gelu_backward(x, lw)}}; };
  return grad_check(forward, backward, {{"x", &x}});
}

GradCheckResult check_linear(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 x = random_tensor({3, 4, 5}, rng);
  Tensor64 w = random_tensor({5, 6}, rng, 0.5);
  Tensor64 b = random_tensor({6}, rng, 0.1);
  auto forward = [&] { return linear(x, w, &b); };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dw = zeros_like(w), db = zeros_like(b);
    linear_backward(x, w, lw, &dx, &dw, &db);
    return NamedGrads{{"x", dx}, {"w", dw}, {"b", db}};
  };
  return grad_check(forward, backward, {{"x", &x}, {"w", &w}, {"b", &b}});
}

GradCheckResult check_cross_entropy(std::uint64_t seed) {
  RngState rng(seed);
  Tensor64 logits = random_tensor({5, 4}, rng);
  std::vector<int> labels{0, 2, 1, 3, 2};
  auto forward = [&] {
    return Tensor64({1}, {cross_entropy(logits, labels)});
  };
  auto backward = [&](const Tensor64& lw) {
    Tensor64 d = cross_entropy_backward(logits, labels);
    for (std::int64_t i = 0; i < d.numel(); ++i) d[i] *= lw[0];
    return NamedGrads{{"logits", d}};
  };
  return grad_check(forward, backward, {{"logits", &logits}});
}

GradCheckResult check_stem(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_conv_stem<double>(4, rng);
  Tensor64 x = random_tensor({1, 3, 8, 8}, rng);
  auto forward = [&] { return conv_stem_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    ConvStemCacheT<double> cache;
    conv_stem_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = conv_stem_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "stem");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "stem");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_patch_embed(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_patch_embed<double>(3, 6, 3, 2, 1, rng);
  Tensor64 x = random_tensor({2, 3, 6, 6}, rng);
  auto forward = [&] { return patch_embed_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    PatchEmbedCacheT<double> cache;
    patch_embed_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = patch_embed_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "embed");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "embed");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_lfe(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_lfe<double>(6, rng);
  Tensor64 x = random_tensor({2, 6, 5, 5}, rng);
  auto forward = [&] { return lfe_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    LfeCacheT<double> cache;
    lfe_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = lfe_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "lfe");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "lfe");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_fd(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_fd<double>(5, rng);
  // generic scale values; zeros would hide the conv path
  for (std::int64_t i = 0; i < p.scale.numel(); ++i) p.scale[i] = rng.normal() * 0.5;
  Tensor64 x = random_tensor({2, 5, 4, 4}, rng);
  auto forward = [&] { return fd_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    FdCacheT<double> cache;
    fd_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = fd_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "fd");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "fd");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_ffn(FfnKind kind, std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_ffn<double>(kind, 6, 12, rng);
  if (kind == FfnKind::kCiFfn) {
    for (std::int64_t i = 0; i < p.fd.scale.numel(); ++i) p.fd.scale[i] = rng.normal() * 0.5;
  }
  Tensor64 x = random_tensor({2, 6, 4, 4}, rng);
  auto forward = [&] { return ffn_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    FfnCacheT<double> cache;
    ffn_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = ffn_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "ffn");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "ffn");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_mhsa(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_mhsa<double>(4, 2, rng);
  Tensor64 tokens = random_tensor({1, 3, 4}, rng);
  auto forward = [&] { return mhsa_forward(tokens, p); };
  auto backward = [&](const Tensor64& lw) {
    MhsaCacheT<double> cache;
    mhsa_forward_cached(tokens, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dt = zeros_like(tokens);
    mhsa_backward(lw, cache, p, grads, &dt);
    NamedGrads out = collect_named(grads, "mhsa");
    out.emplace_back("tokens", std::move(dt));
    return out;
  };
  auto tensors = collect_ptrs(p, "mhsa");
  tensors.emplace_back("tokens", &tokens);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_saa(int sr, std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_saa<double>(6, 2, sr, rng);
  Tensor64 x = random_tensor({1, 6, 4, 4}, rng);
  auto forward = [&] { return saa_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    SaaCacheT<double> cache;
    saa_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = saa_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "saa");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "saa");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_sra(int sr, std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_sra<double>(6, 2, sr, rng);
  Tensor64 x = random_tensor({1, 6, 4, 4}, rng);
  auto forward = [&] { return sra_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    SraCacheT<double> cache;
    sra_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = sra_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "sra");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "sra");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

GradCheckResult check_window(std::uint64_t seed) {
  RngState rng(seed);
  auto p = make_window_attn<double>(6, 2, 2, rng);
  Tensor64 x = random_tensor({1, 6, 4, 4}, rng);
  auto forward = [&] { return window_attn_forward(x, p); };
  auto backward = [&](const Tensor64& lw) {
    WindowAttnCacheT<double> cache;
    window_attn_forward_cached(x, p, cache);
    auto grads = zeros_like(p);
    Tensor64 dx = window_attn_backward(lw, cache, p, grads);
    NamedGrads out = collect_named(grads, "window");
    out.emplace_back("x", std::move(dx));
    return out;
  };
  auto tensors = collect_ptrs(p, "window");
  tensors.emplace_back("x", &x);
  return grad_check(forward, backward, tensors);
}

ModelConfig grad_check_model_config() {
  ModelConfig cfg;
  cfg.name = "gradcheck-tiny";
  cfg.stem_channels = 8;
  cfg.stages = {StageConfig{16, 2, 2, 1}, StageConfig{16, 2, 2, 1}, StageConfig{16, 2, 1, 1},
                StageConfig{16, 2, 1, 1}};
  cfg.expansion_ratio = 2.0;
  cfg.num_classes = 2;
  return cfg;
}

GradCheckResult check_tiny_model(std::uint64_t seed) {
  RngState rng(seed);
  auto cfg = grad_check_model_config();
  auto params = build_model<double>(cfg, rng);
  RngState xrng = rng.split(99);
  Tensor64 x = random_tensor({1, 3, 32, 32}, xrng);
  auto forward = [&]() -> Tensor64 { return model_forward(x, params); };
  auto backward = [&](const Tensor64& lw) {
    ModelCacheT<double> cache;
    model_forward_cached(x, params, cache);
    auto grads = zeros_like(params);
    model_backward(lw, cache, params, grads);
    NamedGrads out;
    visit_params(grads, [&](const std::string& name, Tensor64& t) { out.emplace_back(name, t); });
    return out;
  };
  std::vector<std::pair<std::string, Tensor64*>> tensors;
  visit_params(params, [&](const std::string& name, Tensor64& t) { tensors.emplace_back(name, &t); });
  return grad_check(forward, backward, tensors);
}

const std::vector<std::pair<std::string, Fixture>>& fixtures() {
  static const std::vector<std::pair<std::string, Fixture>> table = {
      {"conv2d", check_conv2d},
      {"conv2d-grouped", check_conv2d_grouped},
      {"transposed-conv2d", check_tconv},
      {"avg-pool", check_avg_pool},
      {"layer-norm", check_layer_norm},
      {"softmax", check_softmax},
      {"gelu", check_gelu},
      {"linear", check_linear},
      {"cross-entropy", check_cross_entropy},
      {"stem", check_stem},
      {"patch-embed", check_patch_embed},
      {"lfe", check_lfe},
      {"fd", check_fd},
      {"ffn", [](std::uint64_t s) { return check_ffn(FfnKind::kFfn, s); }},
      {"dwsffn", [](std::uint64_t s) { return check_ffn(FfnKind::kDwsFfn, s); }},
      {"ciffn", [](std::uint64_t s) { return check_ffn(FfnKind::kCiFfn, s); }},
      {"mhsa", check_mhsa},
      {"saa-sr1", [](std::uint64_t s) { return check_saa(1, s); }},
      {"saa-sr2", [](std::uint64_t s) { return check_saa(2, s); }},
      {"sra-sr1", [](std::uint64_t s) { return check_sra(1, s); }},
      {"sra-sr2", [](std::uint64_t s) { return check_sra(2, s); }},
      {"window", check_window},
      {"tiny-model", check_tiny_model},
  };
  return table;
}

}  // namespace

std::vector<std::string> grad_check_targets() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : fixtures()) names.push_back(name);
  return names;
}

GradCheckResult run_grad_check_target(const std::string& target, std::uint64_t seed) {
  for (const auto& [name, fn] : fixtures()) {
    if (name == target) return fn(seed);
  }
  std::string valid;
  for (const auto& [name, fn] : fixtures()) valid += (valid.empty() ? "" : ", ") + name;
  throw ConfigError("unknown gradcheck target '" + target + "'; valid targets: " + valid);
}

double grad_check_tolerance(const std::string& target) {
  return target == "tiny-model" ? 1e-5 : 1e-6;
}

}  // namespace saevit
