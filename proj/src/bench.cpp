#include "saevit/bench.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "saevit/attention.hpp"

namespace saevit {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double estimate_timer_resolution() {
  double best = 1.0;
  for (int trial = 0; trial < 5; ++trial) {
    auto t0 = Clock::now();
    auto t1 = t0;
    do {
      t1 = Clock::now();
    } while (t1 == t0);
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

std::string bench_environment_string() {
  std::ostringstream os;
  os << "compiler " << __VERSION__ << "; threads " << num_threads() << "; "
#ifdef NDEBUG
     << "release";
#else
     << "debug";
#endif
  return os.str();
}

namespace {

// One module family behind a closure so warmup/timing treat them uniformly.
struct BenchTarget {
  std::function<float()> run;  // returns a data-dependent sink value
};

BenchTarget make_target(const BenchConfig& cfg, RngState& rng) {
  const AttnModuleKind kind = attn_module_from_name(cfg.module);
  Tensor x({cfg.batch, cfg.c, cfg.h, cfg.w});
  RngState xrng = rng.split(1);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(xrng.normal());

  switch (kind) {
    case AttnModuleKind::kMhsa: {
      auto p = std::make_shared<SaaParamsT<float>>(
          make_saa<float>(cfg.c, cfg.heads, 1, rng));  // sr=1 SAA is the plain pre-norm block
      auto xs = std::make_shared<Tensor>(std::move(x));
      return BenchTarget{[p, xs] { return saa_forward(*xs, *p)[0]; }};
    }
    case AttnModuleKind::kSaa: {
      if (cfg.h % cfg.sr != 0 || cfg.w % cfg.sr != 0) {
        throw DimensionError("saa bench: H,W not divisible by sr=" + std::to_string(cfg.sr));
      }
      auto p = std::make_shared<SaaParamsT<float>>(make_saa<float>(cfg.c, cfg.heads, cfg.sr, rng));
      auto xs = std::make_shared<Tensor>(std::move(x));
      return BenchTarget{[p, xs] { return saa_forward(*xs, *p)[0]; }};
    }
    case AttnModuleKind::kSra: {
      if (cfg.h % cfg.sr != 0 || cfg.w % cfg.sr != 0) {
        throw DimensionError("sra bench: H,W not divisible by sr=" + std::to_string(cfg.sr));
      }
      auto p = std::make_shared<SraParamsT<float>>(make_sra<float>(cfg.c, cfg.heads, cfg.sr, rng));
      auto xs = std::make_shared<Tensor>(std::move(x));
      return BenchTarget{[p, xs] { return sra_forward(*xs, *p)[0]; }};
    }
    case AttnModuleKind::kWindow: {
      if (cfg.h % cfg.win != 0 || cfg.w % cfg.win != 0) {
        throw DimensionError("window bench: H,W not divisible by win=" + std::to_string(cfg.win));
      }
      auto p = std::make_shared<WindowAttnParamsT<float>>(
          make_window_attn<float>(cfg.c, cfg.heads, cfg.win, rng));
      auto xs = std::make_shared<Tensor>(std::move(x));
      return BenchTarget{[p, xs] { return window_attn_forward(*xs, *p)[0]; }};
    }
  }
  throw ConfigError("unreachable bench module");
}

}  // namespace

BenchReport bench_module(const BenchConfig& cfg) {
  if (cfg.iters < 1) throw ConfigError("bench: iters must be positive");
  if (cfg.batch < 1) throw ConfigError("bench: batch must be positive");
  RngState rng(cfg.seed);
  BenchTarget target = make_target(cfg, rng);

  BenchReport report;
  report.cfg = cfg;
  report.input_spec = "(" + std::to_string(cfg.batch) + "," + std::to_string(cfg.c) + "," +
                      std::to_string(cfg.h) + "," + std::to_string(cfg.w) + ")";
  report.environment = bench_environment_string();
  report.timer_resolution_s = estimate_timer_resolution();

  float sink = 0;
  // Untimed warmup, at least one iteration.
  const auto warm_start = Clock::now();
  do {
    sink += target.run();
  } while (std::chrono::duration<double>(Clock::now() - warm_start).count() < cfg.warmup_secs);

  report.iter_seconds.reserve(static_cast<std::size_t>(cfg.iters));
  for (int i = 0; i < cfg.iters; ++i) {
    const auto t0 = Clock::now();
    sink += target.run();
    const auto t1 = Clock::now();
    report.iter_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  // keep the computation observable so the loop is not optimized away
  if (!std::isfinite(sink)) throw VerificationError("bench produced non-finite output");

  double total = 0, mn = report.iter_seconds[0];
  for (double t : report.iter_seconds) {
    total += t;
    mn = std::min(mn, t);
  }
  const double mean = total / static_cast<double>(cfg.iters);
  double var = 0;
  for (double t : report.iter_seconds) var += (t - mean) * (t - mean);
  var /= static_cast<double>(cfg.iters);

  report.total_seconds = total;
  report.mean_ms = mean * 1e3;
  report.min_ms = mn * 1e3;
  report.stddev_ms = std::sqrt(var) * 1e3;
  report.throughput_ips = static_cast<double>(cfg.batch * cfg.iters) / total;
  report.timer_warning = report.timer_resolution_s > 0.01 * mean;
  return report;
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os << "bench " << cfg.module << " input " << input_spec << " heads=" << cfg.heads;
  if (cfg.module == "saa" || cfg.module == "sra") os << " sr=" << cfg.sr;
  if (cfg.module == "window") os << " win=" << cfg.win;
  os << "\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "iters %d  warmup %.1fs  mean %.3f ms  min %.3f ms  stddev %.3f ms\n", cfg.iters,
                cfg.warmup_secs, mean_ms, min_ms, stddev_ms);
  os << buf;
  std::snprintf(buf, sizeof(buf), "throughput %.2f images/sec\n", throughput_ips);
  os << buf;
  if (timer_warning) {
    os << "warning: timer resolution coarser than 1% of mean latency\n";
  }
  os << "environment: " << environment << "\n";
  return os.str();
}

std::string BenchReport::to_json_text() const {
  json j{{"module", cfg.module},
         {"input", input_spec},
         {"batch", cfg.batch},
         {"heads", cfg.heads},
         {"sr", cfg.sr},
         {"win", cfg.win},
         {"warmup_secs", cfg.warmup_secs},
         {"iters", cfg.iters},
         {"iter_seconds", iter_seconds},
         {"total_seconds", total_seconds},
         {"mean_ms", mean_ms},
         {"min_ms", min_ms},
         {"stddev_ms", stddev_ms},
         {"throughput_images_per_sec", throughput_ips},
         {"timer_resolution_s", timer_resolution_s},
         {"timer_warning", timer_warning},
         {"environment", environment},
         {"seed", cfg.seed}};
  return j.dump(2) + "\n";
}

}  // namespace saevit
