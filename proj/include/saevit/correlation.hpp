#pragma once

#include <array>
#include <string>
#include <vector>

#include "saevit/rng.hpp"
#include "saevit/tensor.hpp"

namespace saevit {

// Channel redundancy analysis: sample channels of an (N,C,H,W) activation,
// flatten each over the N*H*W observations, and compute the Pearson
// correlation matrix (population variance). Zero-variance channels get
// correlation 0 against everything and are flagged.

struct CorrReport {
  std::vector<std::int64_t> channels;  // sampled indices, ascending
  std::int64_t k = 0;
  std::vector<double> matrix;  // k*k row-major, symmetric, unit diagonal
  double abs_mean_offdiag = 0;
  double std_offdiag = 0;
  std::array<std::int64_t, 20> histogram{};  // off-diagonal entries over [-1,1]
  std::vector<std::int64_t> degenerate;      // zero-variance channels
  std::uint64_t seed = 0;
  std::string weights = "random-init";  // provenance label

  double at(std::int64_t i, std::int64_t j) const {
    return matrix[static_cast<std::size_t>(i * k + j)];
  }
};

template <typename T>
CorrReport channel_correlation(const TensorT<T>& acts, int k, RngState& rng);

void write_matrix_csv(const CorrReport& report, const std::string& path);
void write_hist_csv(const CorrReport& report, const std::string& path);
std::string corr_stats_json_text(const CorrReport& report);

}  // namespace saevit
