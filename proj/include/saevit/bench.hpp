#pragma once

#include <string>
#include <vector>

#include "saevit/flops.hpp"

namespace saevit {

// CPU latency/throughput measurement: untimed warmup for at least
// warmup_secs, then `iters` timed forwards of one module on a fixed seeded
// input. Single-thread by default for comparability.

struct BenchConfig {
  std::string module = "saa";  // mhsa|saa|sra|window
  std::int64_t batch = 8;
  std::int64_t c = 256;
  std::int64_t h = 56, w = 56;
  int heads = 8;
  int sr = 8;
  int win = 7;
  double warmup_secs = 5.0;
  int iters = 50;
  std::uint64_t seed = 42;
};

struct BenchReport {
  BenchConfig cfg;
  std::string input_spec;
  std::vector<double> iter_seconds;
  double total_seconds = 0;
  double mean_ms = 0, min_ms = 0, stddev_ms = 0;
  double throughput_ips = 0;  // batch * iters / total_seconds
  double timer_resolution_s = 0;
  bool timer_warning = false;  // timer coarser than 1% of mean latency
  std::string environment;

  std::string to_text() const;
  std::string to_json_text() const;
};

BenchReport bench_module(const BenchConfig& cfg);
double estimate_timer_resolution();
std::string bench_environment_string();

}  // namespace saevit
