#include "saevit/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>

namespace saevit {

std::int64_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {
std::atomic<int> g_threads{1};
}  // namespace

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int num_threads() { return g_threads.load(); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u32_le(std::FILE* f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  if (std::fwrite(b, 1, 4, f) != 4) throw IoError("short write");
}

std::uint32_t read_u32_le(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw IoError("truncated .sat file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_sat(const Tensor& t, const std::string& path) {
  if (!t.defined()) throw IoError("cannot save undefined tensor to " + path);
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for write: " + path);
  if (std::fwrite("SAT1", 1, 4, f.get()) != 4) throw IoError("short write: " + path);
  write_u32_le(f.get(), static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_u32_le(f.get(), static_cast<std::uint32_t>(t.dim(i)));
  // Host is little-endian; payload goes out verbatim.
  static_assert(sizeof(float) == 4);
  const std::size_t n = static_cast<std::size_t>(t.numel());
  if (std::fwrite(t.ptr(), sizeof(float), n, f.get()) != n) throw IoError("short write: " + path);
}

Tensor load_sat(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, "SAT1", 4) != 0) {
    throw IoError("bad magic in .sat file: " + path);
  }
  const std::uint32_t rank = read_u32_le(f.get(), path);
  if (rank == 0 || rank > 8) throw IoError("unreasonable rank in .sat file: " + path);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(read_u32_le(f.get(), path));
  Tensor t(shape);
  const std::size_t n = static_cast<std::size_t>(t.numel());
  if (std::fread(t.ptr(), sizeof(float), n, f.get()) != n) {
    throw IoError("truncated .sat payload: " + path);
  }
  return t;
}

#ifndef NDEBUG
namespace {
template <typename T>
void check_finite(const T* p, std::int64_t n, const char* op) {
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      std::fprintf(stderr, "non-finite value out of %s at index %lld\n", op,
                   static_cast<long long>(i));
      assert(false && "non-finite op output");
    }
  }
}
}  // namespace
void debug_check_finite_impl(const float* p, std::int64_t n, const char* op) {
  check_finite(p, n, op);
}
void debug_check_finite_impl(const double* p, std::int64_t n, const char* op) {
  check_finite(p, n, op);
}
#endif

}  // namespace saevit
