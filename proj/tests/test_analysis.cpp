#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "saevit/bench.hpp"
#include "saevit/correlation.hpp"
#include "saevit/flops.hpp"
#include "saevit/gradcheck.hpp"
#include "saevit/model.hpp"

using namespace saevit;

namespace {
std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}
std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("mac formulas") {
  CHECK(flops_linear(3136, 256, 256) == 3136LL * 256 * 256);  // L*C^2 on L tokens
  CHECK(flops_conv2d(1, 24, 112, 112, 3, 3, 3) == 8128512);
  CHECK(flops_transposed_conv2d(1, 48, 7, 7, 1, 8, 8) == 150528);
  CHECK(flops_attention_core(1, 49, 49, 256) == 2LL * 49 * 49 * 256);
}

TEST_CASE("model budgets at 224 are inside the published bands") {
  FlopReport t = count_flops_model(make_variant("t"), 1, 224, 224);
  CHECK(t.total_macs == 806437920);
  CHECK(t.total_macs > 0.85 * 0.8e9);
  CHECK(t.total_macs < 1.15 * 0.8e9);

  FlopReport xs = count_flops_model(make_variant("xs"), 1, 224, 224);
  CHECK(xs.total_macs == 1108430016);
  CHECK(xs.total_macs > 0.85 * 1.3e9);
  CHECK(xs.total_macs < 1.15 * 1.3e9);

  // totals are additive over the report lines
  std::int64_t macs = 0, ew = 0;
  for (const auto& line : t.lines) {
    macs += line.macs;
    ew += line.elementwise;
  }
  CHECK(macs == t.total_macs);
  CHECK(ew == t.total_elementwise);
  CHECK(t.total() == macs + ew);
}

TEST_CASE("attention module ordering at the 56x56 protocol geometry") {
  AttnGeometry g;  // n=1, c=256, h=w=56, heads=8, sr=8, win=7
  FlopReport saa = count_flops_attention(AttnModuleKind::kSaa, g);
  FlopReport sra = count_flops_attention(AttnModuleKind::kSra, g);
  FlopReport win = count_flops_attention(AttnModuleKind::kWindow, g);
  FlopReport mhsa = count_flops_attention(AttnModuleKind::kMhsa, g);

  CHECK(saa.total_macs == 14877184);
  CHECK(win.total_macs == 900759552);
  CHECK(sra.total_macs == 900759552);  // exact MAC tie; pooling breaks it elementwise
  CHECK(mhsa.total_macs == 5857345536);

  CHECK(saa.total() == 20655656);
  CHECK(win.total() == 914131456);
  CHECK(sra.total() == 915762176);
  CHECK(mhsa.total() == 6257950720);

  CHECK(saa.total() < win.total());
  CHECK(win.total() < sra.total());
  CHECK(sra.total() < mhsa.total());

  // saa at sr=1 is structurally the plain block: identical report totals
  AttnGeometry g1 = g;
  g1.sr = 1;
  FlopReport saa1 = count_flops_attention(AttnModuleKind::kSaa, g1);
  CHECK(saa1.total_macs == mhsa.total_macs);
  CHECK(saa1.total() == mhsa.total());

  AttnGeometry bad = g;
  bad.win = 5;
  CHECK_THROWS_AS(count_flops_attention(AttnModuleKind::kWindow, bad), DimensionError);
}

TEST_CASE("saa flops strictly decrease as sr grows") {
  std::int64_t prev_total = -1, prev_macs = -1;
  for (int sr : {2, 4, 8}) {
    AttnGeometry g;
    g.sr = sr;
    FlopReport r = count_flops_attention(AttnModuleKind::kSaa, g);
    if (prev_total >= 0) {
      CHECK(r.total() < prev_total);
      CHECK(r.total_macs < prev_macs);
    }
    prev_total = r.total();
    prev_macs = r.total_macs;
  }
}

TEST_CASE("report emission carries the convention and parses as json") {
  FlopReport t = count_flops_model(make_variant("tiny"), 1, 32, 32);
  const std::string text = t.to_text();
  CHECK(text.find("MAC") != std::string::npos);
  CHECK(text.find("total") != std::string::npos);
  const std::string j = t.to_json_text();
  CHECK(j.find("\"total_macs\"") != std::string::npos);
}

TEST_CASE("gradcheck on a linear layer is near machine precision") {
  auto result = run_grad_check_target("linear", 3);
  CHECK(result.worst < 1e-8);
}

TEST_CASE("gradcheck rejects a sign-flipped backward") {
  RngState rng(4);
  Tensor64 x({3, 4});
  Tensor64 w({4, 2});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
  auto forward = [&] { return linear(x, w, nullptr); };
  auto corrupted = [&](const Tensor64& lw) {
    Tensor64 dx = zeros_like(x), dw = zeros_like(w);
    linear_backward(x, w, lw, &dx, &dw, nullptr);
    for (std::int64_t i = 0; i < dw.numel(); ++i) dw[i] = -dw[i];  // deliberate corruption
    return NamedGrads{{"w", dw}};
  };
  auto result = grad_check(forward, corrupted, {{"w", &w}});
  CHECK(result.worst > 1e-1);
  CHECK_FALSE(result.pass(1e-6));
}

TEST_CASE("gradcheck registry names its targets") {
  CHECK_THROWS_WITH_AS(run_grad_check_target("bogus", 1), doctest::Contains("valid targets"),
                       ConfigError);
  auto names = grad_check_targets();
  CHECK(names.size() >= 20);
  CHECK(grad_check_tolerance("tiny-model") == 1e-5);
  CHECK(grad_check_tolerance("saa-sr2") == 1e-6);
}

TEST_CASE("ops gradcheck suite") {
  for (const char* target :
       {"conv2d", "conv2d-grouped", "transposed-conv2d", "avg-pool", "layer-norm", "softmax",
        "gelu", "cross-entropy"}) {
    auto result = run_grad_check_target(target, 17);
    INFO(target, " worst tensor ", result.worst_tensor);
    CHECK(result.worst < 1e-6);
  }
}

TEST_CASE("correlation identities") {
  // two duplicated channels, one anti-correlated, one flat
  const std::int64_t obs = 64;
  Tensor acts({1, 4, 8, 8});
  RngState rng(5);
  for (std::int64_t p = 0; p < obs; ++p) {
    const float v = static_cast<float>(rng.normal());
    acts[0 * obs + p] = v;
    acts[1 * obs + p] = v;        // duplicate
    acts[2 * obs + p] = -v;       // negation
    acts[3 * obs + p] = 2.5f;     // zero variance
  }
  RngState crng(6);
  CorrReport r = channel_correlation(acts, 4, crng);
  REQUIRE(r.k == 4);
  REQUIRE(r.channels == std::vector<std::int64_t>{0, 1, 2, 3});
  CHECK(r.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.at(0, 2) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(r.at(0, 3) == 0.0);  // degenerate channel correlations are defined as 0
  REQUIRE(r.degenerate.size() == 1);
  CHECK(r.degenerate[0] == 3);

  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(r.at(i, i) == 1.0);
    for (std::int64_t j = 0; j < 4; ++j) {
      CHECK(r.at(i, j) == r.at(j, i));
      CHECK(r.at(i, j) <= 1.0);
      CHECK(r.at(i, j) >= -1.0);
    }
  }

  Tensor toofew({1, 1, 4, 4});
  RngState crng2(7);
  CHECK_THROWS_AS(channel_correlation(toofew, 4, crng2), InputError);
}

TEST_CASE("independent gaussian channels decorrelate at 1e4 observations") {
  const std::int64_t c = 24, hw = 100;  // 10^4 observations per channel
  Tensor acts({1, c, hw, hw});
  RngState rng(8);
  for (std::int64_t i = 0; i < acts.numel(); ++i) acts[i] = static_cast<float>(rng.normal());
  RngState crng(9);
  CorrReport r = channel_correlation(acts, static_cast<int>(c), crng);
  CHECK(r.abs_mean_offdiag < 0.03);
}

TEST_CASE("correlation csv output is deterministic") {
  ModelConfig cfg = make_variant("tiny");
  RngState rng(10);
  auto params = build_model<float>(cfg, rng);
  RngState xrng(11);
  Tensor x({2, 3, 32, 32});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(xrng.normal());
  Tensor acts = capture_activations(x, params, 3);

  auto run = [&](const std::string& tag) {
    RngState crng(12);
    CorrReport r = channel_correlation(acts, 16, crng);
    const std::string mpath = temp_file("m_" + tag + ".csv");
    const std::string hpath = temp_file("h_" + tag + ".csv");
    write_matrix_csv(r, mpath);
    write_hist_csv(r, hpath);
    return slurp(mpath) + "|" + slurp(hpath) + "|" + corr_stats_json_text(r);
  };
  CHECK(run("a") == run("b"));

  RngState crng(12);
  CorrReport r = channel_correlation(acts, 16, crng);
  std::int64_t hist_total = 0;
  for (auto b : r.histogram) hist_total += b;
  CHECK(hist_total == r.k * (r.k - 1) / 2);  // upper triangle
}

TEST_CASE("bench arithmetic identities on a tiny module") {
  BenchConfig cfg;
  cfg.module = "saa";
  cfg.batch = 2;
  cfg.c = 8;
  cfg.h = cfg.w = 8;
  cfg.heads = 2;
  cfg.sr = 2;
  cfg.iters = 5;
  cfg.warmup_secs = 0.01;
  BenchReport report = bench_module(cfg);
  REQUIRE(report.iter_seconds.size() == 5);
  double total = 0;
  for (double t : report.iter_seconds) total += t;
  CHECK(report.throughput_ips ==
        doctest::Approx(static_cast<double>(cfg.batch * cfg.iters) / total).epsilon(1e-9));
  CHECK(report.mean_ms == doctest::Approx(total / 5 * 1e3).epsilon(1e-9));
  CHECK(report.input_spec == "(2,8,8,8)");
  CHECK(!report.environment.empty());
  CHECK(report.to_text().find("throughput") != std::string::npos);
  CHECK(report.to_json_text().find("iter_seconds") != std::string::npos);

  BenchConfig bad = cfg;
  bad.module = "nope";
  CHECK_THROWS_AS(bench_module(bad), ConfigError);
}

TEST_CASE("latency and throughput batch modes are both supported") {
  for (std::int64_t batch : {1, 4}) {
    BenchConfig cfg;
    cfg.module = "sra";
    cfg.batch = batch;
    cfg.c = 8;
    cfg.h = cfg.w = 8;
    cfg.heads = 2;
    cfg.sr = 2;
    cfg.iters = 3;
    cfg.warmup_secs = 0.0;
    BenchReport report = bench_module(cfg);
    CHECK(report.cfg.batch == batch);
    CHECK(report.throughput_ips > 0);
  }
}
