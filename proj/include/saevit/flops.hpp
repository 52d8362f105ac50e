#pragma once

#include <string>
#include <vector>

#include "saevit/model.hpp"

namespace saevit {

// Analytic operation counts. Convention: 1 FLOP = 1 multiply-accumulate for
// conv / linear / attention matmuls (the GMACs-as-GFLOPs convention of the
// compared model family). Normalization, activations, pooling, softmax, bias
// and residual traffic are tallied separately as elementwise ops. Module
// totals for comparisons are macs + elementwise.

struct FlopLine {
  std::string name;
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;
};

struct FlopReport {
  std::string config;  // echo of what was counted
  std::string convention;
  std::vector<FlopLine> lines;
  std::int64_t total_macs = 0;
  std::int64_t total_elementwise = 0;

  std::int64_t total() const { return total_macs + total_elementwise; }
  void add(const FlopLine& line);
  std::string to_text() const;
  std::string to_json_text() const;
};

// Elementwise cost constants (ops per element), documented in the report.
inline constexpr std::int64_t kEwLayerNorm = 4;
inline constexpr std::int64_t kEwGelu = 8;
inline constexpr std::int64_t kEwSoftmax = 4;  // per score entry

// MAC formulas behind every counter.
std::int64_t flops_conv2d(std::int64_t n, std::int64_t cout, std::int64_t hout, std::int64_t wout,
                          std::int64_t cin_per_group, std::int64_t kh, std::int64_t kw);
std::int64_t flops_transposed_conv2d(std::int64_t n, std::int64_t cin, std::int64_t hin,
                                     std::int64_t win, std::int64_t cout_per_group,
                                     std::int64_t kh, std::int64_t kw);
std::int64_t flops_linear(std::int64_t rows, std::int64_t cin, std::int64_t cout);
std::int64_t flops_attention_core(std::int64_t n, std::int64_t lq, std::int64_t lk,
                                  std::int64_t c);

FlopReport count_flops_model(const ModelConfig& cfg, std::int64_t n, std::int64_t h,
                             std::int64_t w);

enum class AttnModuleKind { kMhsa, kSaa, kSra, kWindow };
const char* attn_module_name(AttnModuleKind k);
AttnModuleKind attn_module_from_name(const std::string& name);

struct AttnGeometry {
  std::int64_t n = 1, c = 256, h = 56, w = 56;
  int heads = 8;
  int sr = 8;   // saa/sra
  int win = 7;  // window
};

FlopReport count_flops_attention(AttnModuleKind kind, const AttnGeometry& g);

}  // namespace saevit
