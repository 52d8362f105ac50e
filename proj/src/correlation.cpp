#include "saevit/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace saevit {

using nlohmann::json;

template <typename T>
CorrReport channel_correlation(const TensorT<T>& acts, int k, RngState& rng) {
  if (acts.rank() != 4) {
    throw DimensionError("channel_correlation: input must be (N,C,H,W), got " +
                         shape_str(acts.shape()));
  }
  const std::int64_t n = acts.dim(0), c = acts.dim(1), plane = acts.dim(2) * acts.dim(3);
  const std::int64_t obs = n * plane;
  if (c < 2) throw InputError("channel_correlation: need at least 2 channels");
  if (obs < 2) throw InputError("channel_correlation: need at least 2 observations per channel");
  if (k < 1) throw InputError("channel_correlation: k must be positive");

  CorrReport report;
  report.seed = rng.seed();
  report.k = std::min<std::int64_t>(k, c);

  // sample without replacement, then sort for stable reporting
  std::vector<std::int64_t> pool(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = 0; i < report.k; ++i) {
    const std::int64_t j = i + rng.uniform_int(c - i);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  report.channels.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(report.k));
  std::sort(report.channels.begin(), report.channels.end());

  // per-channel observation vectors (flattened over N,H,W), centered
  const std::int64_t kk = report.k;
  std::vector<std::vector<double>> centered(static_cast<std::size_t>(kk));
  std::vector<double> stddevs(static_cast<std::size_t>(kk));
  for (std::int64_t i = 0; i < kk; ++i) {
    const std::int64_t ch = report.channels[static_cast<std::size_t>(i)];
    auto& vec = centered[static_cast<std::size_t>(i)];
    vec.resize(static_cast<std::size_t>(obs));
    double mean = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* src = acts.ptr() + (b * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const double v = static_cast<double>(src[p]);
        vec[static_cast<std::size_t>(b * plane + p)] = v;
        mean += v;
      }
    }
    mean /= static_cast<double>(obs);
    double var = 0;
    for (auto& v : vec) {
      v -= mean;
      var += v * v;
    }
    var /= static_cast<double>(obs);  // population variance
    stddevs[static_cast<std::size_t>(i)] = std::sqrt(var);
    if (var == 0.0) report.degenerate.push_back(ch);
  }

  report.matrix.assign(static_cast<std::size_t>(kk * kk), 0.0);
  for (std::int64_t i = 0; i < kk; ++i) {
    report.matrix[static_cast<std::size_t>(i * kk + i)] = 1.0;
    for (std::int64_t j = i + 1; j < kk; ++j) {
      double r = 0.0;
      const double si = stddevs[static_cast<std::size_t>(i)];
      const double sj = stddevs[static_cast<std::size_t>(j)];
      if (si > 0.0 && sj > 0.0) {
        double cov = 0;
        const auto& a = centered[static_cast<std::size_t>(i)];
        const auto& b = centered[static_cast<std::size_t>(j)];
        for (std::int64_t p = 0; p < obs; ++p) {
          cov += a[static_cast<std::size_t>(p)] * b[static_cast<std::size_t>(p)];
        }
        cov /= static_cast<double>(obs);
        r = cov / (si * sj);
        r = std::clamp(r, -1.0, 1.0);
      }
      report.matrix[static_cast<std::size_t>(i * kk + j)] = r;
      report.matrix[static_cast<std::size_t>(j * kk + i)] = r;
    }
  }

  // off-diagonal stats + 20-bin histogram over [-1,1], upper triangle
  double abs_sum = 0, sum = 0, sum_sq = 0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < kk; ++i) {
    for (std::int64_t j = i + 1; j < kk; ++j) {
      const double r = report.at(i, j);
      abs_sum += std::abs(r);
      sum += r;
      sum_sq += r * r;
      ++count;
      const auto bin = static_cast<std::size_t>(
          std::min<std::int64_t>(19, static_cast<std::int64_t>((r + 1.0) * 10.0)));
      ++report.histogram[bin];
    }
  }
  if (count > 0) {
    report.abs_mean_offdiag = abs_sum / static_cast<double>(count);
    const double mean = sum / static_cast<double>(count);
    report.std_offdiag = std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean));
  }
  return report;
}

template CorrReport channel_correlation<float>(const TensorT<float>&, int, RngState&);
template CorrReport channel_correlation<double>(const TensorT<double>&, int, RngState&);

namespace {
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}
}  // namespace

void write_matrix_csv(const CorrReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "channel";
  for (auto ch : report.channels) out << "," << ch;
  out << "\n";
  for (std::int64_t i = 0; i < report.k; ++i) {
    out << report.channels[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < report.k; ++j) out << "," << fmt_double(report.at(i, j));
    out << "\n";
  }
}

void write_hist_csv(const CorrReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < report.histogram.size(); ++b) {
    const double lo = -1.0 + 0.1 * static_cast<double>(b);
    out << fmt_double(lo) << "," << fmt_double(lo + 0.1) << "," << report.histogram[b] << "\n";
  }
}

std::string corr_stats_json_text(const CorrReport& report) {
  json j{{"k", report.k},
         {"seed", report.seed},
         {"channels", report.channels},
         {"abs_mean", report.abs_mean_offdiag},
         {"std", report.std_offdiag},
         {"degenerate_channels", report.degenerate},
         {"weights", report.weights},
         {"histogram", report.histogram}};
  return j.dump(2) + "\n";
}

}  // namespace saevit
