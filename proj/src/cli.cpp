#include "saevit/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "saevit/bench.hpp"
#include "saevit/correlation.hpp"
#include "saevit/flops.hpp"
#include "saevit/gradcheck.hpp"
#include "saevit/model.hpp"

namespace saevit {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

ModelConfig resolve_config(const std::string& variant, const std::string& config_path) {
  if (!config_path.empty()) return load_model_config(config_path);
  return make_variant(variant);
}

void apply_threads(int threads) {
  if (threads <= 0) {
    if (const char* env = std::getenv("SAEVIT_THREADS")) threads = std::atoi(env);
  }
  set_num_threads(threads <= 0 ? 1 : threads);
}

void write_or_print(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot write " + out_path);
  out << text;
}

// Aggregate report lines / param counts by their top-level name component.
std::map<std::string, std::pair<std::int64_t, std::int64_t>> flops_by_group(
    const FlopReport& report) {
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> out;
  for (const auto& line : report.lines) {
    const auto dot = line.name.find('.');
    const std::string key = dot == std::string::npos ? line.name : line.name.substr(0, dot);
    out[key].first += line.macs;
    out[key].second += line.elementwise;
  }
  return out;
}

int cmd_info(const std::string& variant, const std::string& config_path, std::int64_t input_size,
             std::uint64_t seed, const std::string& format, const std::string& out_path) {
  ModelConfig cfg = resolve_config(variant, config_path);
  RngState rng(seed);
  ModelParams params = build_model<float>(cfg, rng);
  ParamCount count = count_params(params);
  auto params_by_stage = rollup(count, 1);
  FlopReport flops = count_flops_model(cfg, 1, input_size, input_size);
  auto flops_by_stage = flops_by_group(flops);

  if (format == "json") {
    json stages = json::array();
    std::int64_t side = input_size / 2;
    for (int s = 0; s < 4; ++s) {
      const auto& st = cfg.stages[static_cast<std::size_t>(s)];
      side /= 2;
      const std::string key = "stage" + std::to_string(s + 1);
      stages.push_back({{"stage", s + 1},
                        {"output_size", std::to_string(side) + "x" + std::to_string(side)},
                        {"channels", st.channels},
                        {"heads", st.heads},
                        {"sr", st.sr},
                        {"depth", st.depth},
                        {"params", params_by_stage.count(key) ? params_by_stage[key] : 0},
                        {"macs", flops_by_stage.count(key) ? flops_by_stage[key].first : 0}});
    }
    json j{{"config", json::parse(model_config_to_json_text(cfg))},
           {"input_size", input_size},
           {"stages", stages},
           {"total_params", count.total},
           {"total_macs", flops.total_macs},
           {"total_elementwise", flops.total_elementwise}};
    write_or_print(j.dump(2) + "\n", out_path);
    return 0;
  }

  std::string text;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "model %s, input %lldx%lld\n", cfg.name.c_str(),
                static_cast<long long>(input_size), static_cast<long long>(input_size));
  text += buf;
  std::snprintf(buf, sizeof(buf), "%-8s %-10s %8s %6s %4s %6s %12s %14s\n", "stage", "out",
                "C", "heads", "sr", "depth", "params", "macs");
  text += buf;
  std::int64_t side = input_size / 2;
  if (params_by_stage.count("stem")) {
    std::snprintf(buf, sizeof(buf), "%-8s %-10s %8lld %6s %4s %6s %12lld %14lld\n", "stem",
                  (std::to_string(side) + "x" + std::to_string(side)).c_str(),
                  static_cast<long long>(cfg.stem_channels), "-", "-", "-",
                  static_cast<long long>(params_by_stage["stem"]),
                  static_cast<long long>(flops_by_stage["stem"].first));
    text += buf;
  }
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    side /= 2;
    const std::string key = "stage" + std::to_string(s + 1);
    std::snprintf(buf, sizeof(buf), "%-8s %-10s %8lld %6d %4d %6d %12lld %14lld\n", key.c_str(),
                  (std::to_string(side) + "x" + std::to_string(side)).c_str(),
                  static_cast<long long>(st.channels), st.heads, st.sr, st.depth,
                  static_cast<long long>(params_by_stage[key]),
                  static_cast<long long>(flops_by_stage[key].first));
    text += buf;
  }
  std::snprintf(buf, sizeof(buf), "%-8s %-10s %8s %6s %4s %6s %12lld %14lld\n", "head", "-", "-",
                "-", "-", "-", static_cast<long long>(params_by_stage["head"]),
                static_cast<long long>(flops_by_stage["head"].first));
  text += buf;
  std::snprintf(buf, sizeof(buf), "total params %lld (%.2f M)\n",
                static_cast<long long>(count.total), static_cast<double>(count.total) / 1e6);
  text += buf;
  std::snprintf(buf, sizeof(buf), "total macs %lld (%.3f G), elementwise %lld\n",
                static_cast<long long>(flops.total_macs),
                static_cast<double>(flops.total_macs) / 1e9,
                static_cast<long long>(flops.total_elementwise));
  text += buf;
  write_or_print(text, out_path);
  return 0;
}

int cmd_bench(const BenchConfig& bench_cfg, const std::string& format,
              const std::string& out_path) {
  AttnGeometry geom;
  geom.n = bench_cfg.batch;
  geom.c = bench_cfg.c;
  geom.h = bench_cfg.h;
  geom.w = bench_cfg.w;
  geom.heads = bench_cfg.heads;
  geom.sr = bench_cfg.sr;
  geom.win = bench_cfg.win;
  FlopReport flops = count_flops_attention(attn_module_from_name(bench_cfg.module), geom);
  BenchReport report = bench_module(bench_cfg);
  if (format == "json") {
    json j{{"bench", json::parse(report.to_json_text())},
           {"flops", json::parse(flops.to_json_text())}};
    write_or_print(j.dump(2) + "\n", out_path);
  } else {
    std::string text = report.to_text();
    char buf[160];
    std::snprintf(buf, sizeof(buf), "analytic macs %lld, elementwise %lld, total %lld\n",
                  static_cast<long long>(flops.total_macs),
                  static_cast<long long>(flops.total_elementwise),
                  static_cast<long long>(flops.total()));
    text += buf;
    write_or_print(text, out_path);
  }
  return 0;
}

int cmd_gradcheck(const std::string& target, std::uint64_t seed) {
  std::vector<std::string> targets;
  if (target == "all") {
    targets = grad_check_targets();
  } else {
    targets.push_back(target);
  }
  bool all_pass = true;
  for (const auto& t : targets) {
    const GradCheckResult result = run_grad_check_target(t, seed);  // throws on unknown target
    const double tol = grad_check_tolerance(t);
    const bool ok = result.pass(tol);
    all_pass = all_pass && ok;
    std::printf("%-18s %s  worst rel err %.3e (tensor %s, tol %.0e)\n", t.c_str(),
                ok ? "PASS" : "FAIL", result.worst, result.worst_tensor.c_str(), tol);
  }
  return all_pass ? 0 : 1;
}

int cmd_correlate(const std::string& variant, const std::string& config_path,
                  const std::string& ffn, const std::string& checkpoint, int channels, int stage,
                  std::int64_t batch, std::int64_t input_size, std::uint64_t seed,
                  const std::string& out_dir) {
  ModelParams params = [&] {
    if (!checkpoint.empty()) return load_checkpoint(checkpoint);
    ModelConfig cfg = resolve_config(variant, config_path);
    if (!ffn.empty()) cfg.toggles.ffn = ffn_kind_from_name(ffn);
    RngState rng(seed);
    return build_model<float>(cfg, rng);
  }();

  RngState data_rng = RngState(seed).split(17);
  Tensor x({batch, 3, input_size, input_size});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(data_rng.normal());
  Tensor acts = capture_activations(x, params, stage);

  RngState channel_rng = RngState(seed).split(23);
  CorrReport report = channel_correlation(acts, channels, channel_rng);
  report.seed = seed;
  report.weights = checkpoint.empty() ? "random-init" : "checkpoint:" + checkpoint;

  fs::create_directories(out_dir);
  write_matrix_csv(report, (fs::path(out_dir) / "matrix.csv").string());
  write_hist_csv(report, (fs::path(out_dir) / "hist.csv").string());
  {
    std::ofstream out(fs::path(out_dir) / "stats.json");
    if (!out) throw IoError("cannot write stats.json in " + out_dir);
    out << corr_stats_json_text(report);
  }
  std::printf("correlation: stage %d activations %s, k=%lld, abs-mean %.4f, std %.4f (%s)\n",
              stage, shape_str(acts.shape()).c_str(), static_cast<long long>(report.k),
              report.abs_mean_offdiag, report.std_offdiag, report.weights.c_str());
  std::printf("wrote %s/matrix.csv, hist.csv, stats.json\n", out_dir.c_str());
  return 0;
}

int cmd_forward(const std::string& variant, const std::string& config_path,
                const std::string& checkpoint, const std::string& input_path,
                const std::string& out_path, std::uint64_t seed) {
  ModelParams params = [&] {
    if (!checkpoint.empty()) return load_checkpoint(checkpoint);
    ModelConfig cfg = resolve_config(variant, config_path);
    RngState rng(seed);
    return build_model<float>(cfg, rng);
  }();
  Tensor x = load_sat(input_path);
  Tensor logits = model_forward(x, params);
  save_sat(logits, out_path);
  std::printf("logits %s written to %s\n", shape_str(logits.shape()).c_str(), out_path.c_str());
  return 0;
}

int cmd_train_smoke(const std::string& variant, const std::string& config_path, int steps,
                    double lr, double momentum, std::int64_t samples, std::int64_t input_size,
                    std::uint64_t seed, const std::string& out_dir) {
  ModelConfig cfg = resolve_config(variant, config_path);
  RngState rng(seed);
  ModelParams params = build_model<float>(cfg, rng);
  RngState data_rng = rng.split(3);
  SmokeDatasetT<float> data =
      make_smoke_dataset<float>(samples, cfg.num_classes, input_size, data_rng);
  std::vector<float> losses =
      train_smoke(params, data, steps, static_cast<float>(lr), static_cast<float>(momentum));

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream trace(fs::path(out_dir) / "loss_trace.csv");
    if (!trace) throw IoError("cannot write loss_trace.csv in " + out_dir);
    trace << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, static_cast<double>(losses[i]));
      trace << buf;
    }
    save_checkpoint(params, (fs::path(out_dir) / "checkpoint").string());
  }
  const double ratio = static_cast<double>(losses.back()) / static_cast<double>(losses.front());
  std::printf("train-smoke: %d steps, loss %.4f -> %.4f (final/initial %.4f)\n", steps,
              static_cast<double>(losses.front()), static_cast<double>(losses.back()), ratio);
  if (!out_dir.empty()) {
    std::printf("wrote %s/loss_trace.csv and checkpoint/\n", out_dir.c_str());
  }
  return 0;
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"SAEViT building blocks: model info, benchmarks, gradient checks, "
               "channel-correlation analysis, training smoke tests"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "kernel-internal threads (default 1; env SAEVIT_THREADS)");

  // info
  std::string info_variant = "t", info_config, info_format = "text", info_out;
  std::int64_t info_input = 224;
  std::uint64_t info_seed = 42;
  auto* info = app.add_subcommand("info", "per-stage shapes, parameter and MAC budgets");
  info->add_option("--variant", info_variant, "model variant (t|xs|tiny)");
  info->add_option("--config", info_config, "model config JSON path");
  info->add_option("--input-size", info_input, "square input resolution");
  info->add_option("--seed", info_seed, "init seed");
  info->add_option("--format", info_format, "text|json");
  info->add_option("--out", info_out, "write report to file");

  // bench
  BenchConfig bench_cfg;
  std::string bench_format = "text", bench_out;
  auto* bench = app.add_subcommand("bench", "CPU latency/throughput of one attention module");
  bench->add_option("--module", bench_cfg.module, "mhsa|saa|sra|window")->required();
  bench->add_option("--h", bench_cfg.h, "feature map height (default 56)");
  bench->add_option("--w", bench_cfg.w, "feature map width (default 56)");
  bench->add_option("--c", bench_cfg.c, "channels (default 256)");
  bench->add_option("--heads", bench_cfg.heads, "attention heads (default 8)");
  bench->add_option("--sr", bench_cfg.sr, "down-sampling rate for saa/sra (default 8)");
  bench->add_option("--win", bench_cfg.win, "window size for window attention (default 7)");
  bench->add_option("--batch", bench_cfg.batch, "batch size (default 8)");
  bench->add_option("--iters", bench_cfg.iters, "timed iterations (default 50)");
  bench->add_option("--warmup-secs", bench_cfg.warmup_secs, "untimed warmup seconds (default 5)");
  bench->add_option("--seed", bench_cfg.seed, "init seed");
  bench->add_option("--format", bench_format, "text|json");
  bench->add_option("--out", bench_out, "write report to file");

  // gradcheck
  std::string grad_target;
  std::uint64_t grad_seed = 7;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification (f64)");
  grad->add_option("--target", grad_target, "op/block name, tiny-model, or all")->required();
  grad->add_option("--seed", grad_seed, "fixture seed");

  // correlate
  std::string corr_variant = "t", corr_config, corr_ffn, corr_checkpoint, corr_out = "corr-out";
  int corr_channels = 100, corr_stage = 3;
  std::int64_t corr_batch = 2, corr_input = 224;
  std::uint64_t corr_seed = 42;
  auto* corr = app.add_subcommand("correlate", "channel Pearson-correlation analysis");
  corr->add_option("--variant", corr_variant, "model variant");
  corr->add_option("--config", corr_config, "model config JSON path");
  corr->add_option("--ffn", corr_ffn, "override FFN kind (ffn|dwsffn|ciffn)");
  corr->add_option("--checkpoint", corr_checkpoint, "load weights from checkpoint dir");
  corr->add_option("--channels", corr_channels, "channels to sample (default 100)");
  corr->add_option("--stage", corr_stage, "stage activation to capture (1..4, default 3)");
  corr->add_option("--batch", corr_batch, "input batch size");
  corr->add_option("--input-size", corr_input, "square input resolution");
  corr->add_option("--seed", corr_seed, "seed for input and channel sampling");
  corr->add_option("--out", corr_out, "output directory");

  // forward
  std::string fwd_variant = "t", fwd_config, fwd_checkpoint, fwd_input, fwd_out = "logits.sat";
  std::uint64_t fwd_seed = 42;
  auto* fwd = app.add_subcommand("forward", "run one forward pass on a .sat tensor");
  fwd->add_option("--variant", fwd_variant, "model variant");
  fwd->add_option("--config", fwd_config, "model config JSON path");
  fwd->add_option("--checkpoint", fwd_checkpoint, "load weights from checkpoint dir");
  fwd->add_option("--input", fwd_input, "input tensor (.sat)")->required();
  fwd->add_option("--out", fwd_out, "output logits path (.sat)");
  fwd->add_option("--seed", fwd_seed, "init seed when no checkpoint given");

  // train-smoke
  std::string train_variant = "tiny", train_config, train_out = "train-out";
  int train_steps = 300;
  double train_lr = 0.05, train_momentum = 0.9;
  std::int64_t train_samples = 32, train_input = 32;
  std::uint64_t train_seed = 42;
  auto* train = app.add_subcommand("train-smoke", "overfit a tiny model on synthetic data");
  train->add_option("--variant", train_variant, "model variant (default tiny)");
  train->add_option("--config", train_config, "model config JSON path");
  train->add_option("--steps", train_steps, "SGD steps (default 300)");
  train->add_option("--lr", train_lr, "learning rate (default 0.05)");
  train->add_option("--momentum", train_momentum, "momentum (default 0.9)");
  train->add_option("--samples", train_samples, "synthetic sample count (default 32)");
  train->add_option("--input-size", train_input, "square input resolution (default 32)");
  train->add_option("--seed", train_seed, "seed for init and data");
  train->add_option("--out", train_out, "output directory ('' to skip writing)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    apply_threads(threads);
    if (*info) {
      return cmd_info(info_variant, info_config, info_input, info_seed, info_format, info_out);
    }
    if (*bench) return cmd_bench(bench_cfg, bench_format, bench_out);
    if (*grad) return cmd_gradcheck(grad_target, grad_seed);
    if (*corr) {
      return cmd_correlate(corr_variant, corr_config, corr_ffn, corr_checkpoint, corr_channels,
                           corr_stage, corr_batch, corr_input, corr_seed, corr_out);
    }
    if (*fwd) return cmd_forward(fwd_variant, fwd_config, fwd_checkpoint, fwd_input, fwd_out,
                                 fwd_seed);
    if (*train) {
      return cmd_train_smoke(train_variant, train_config, train_steps, train_lr, train_momentum,
                             train_samples, train_input, train_seed, train_out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace saevit
