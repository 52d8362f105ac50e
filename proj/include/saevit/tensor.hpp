#pragma once

#include <cassert>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "saevit/errors.hpp"

namespace saevit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

/// Dense contiguous tensor. Activations are NCHW; weights use whatever rank
/// the op defines. T is float for compute, double for gradient checking.
/// Data is immutable by convention once an op has produced it; the optional
/// grad buffer is the one sanctioned in-place mutation point.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  explicit TensorT(Shape shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT full(Shape shape, T value) {
    TensorT t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  template <typename U>
  static TensorT cast_from(const TensorT<U>& other) {
    TensorT t(other.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(other[i]);
    return t;
  }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Flat index helpers for the common ranks.
  T& at(std::int64_t a, std::int64_t b) { return data_[static_cast<std::size_t>(a * shape_[1] + b)]; }
  const T& at(std::int64_t a, std::int64_t b) const {
    return data_[static_cast<std::size_t>(a * shape_[1] + b)];
  }
  T& at(std::int64_t a, std::int64_t b, std::int64_t c) {
    return data_[static_cast<std::size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  const T& at(std::int64_t a, std::int64_t b, std::int64_t c) const {
    return data_[static_cast<std::size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  T& at(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }
  const T& at(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
  }

  // Optional same-shape gradient buffer.
  bool has_grad() const { return !grad_.empty(); }
  void ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T(0));
  }
  void zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), T(0));
  }
  std::vector<T>& grad() {
    if (grad_.empty()) throw StateError("gradient buffer not allocated");
    return grad_;
  }
  const std::vector<T>& grad() const {
    if (grad_.empty()) throw StateError("gradient buffer not allocated");
    return grad_;
  }
  /// In-place accumulation, the one sanctioned mutation of an existing tensor.
  void accumulate_grad(const TensorT& g) {
    if (!same_shape(g.shape(), shape_)) {
      throw DimensionError("grad shape " + shape_str(g.shape()) + " != tensor shape " +
                           shape_str(shape_));
    }
    ensure_grad();
    for (std::size_t i = 0; i < grad_.size(); ++i) grad_[i] += g.data()[i];
  }

 private:
  static std::size_t checked_numel(const Shape& s) {
    return static_cast<std::size_t>(shape_numel(s));
  }

  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

/// Kernel-internal thread count; 1 (the default) is the deterministic
/// benchmark mode. Parallel kernels write disjoint slices so results are
/// deterministic for any fixed count.
void set_num_threads(int n);
int num_threads();

/// Splits [0, n) into contiguous chunks, one per worker. fn(begin, end).
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int workers = num_threads();
  if (workers <= 1 || n < 2) {
    fn(std::int64_t(0), n);
    return;
  }
  const int used = static_cast<int>(std::min<std::int64_t>(workers, n));
  const std::int64_t chunk = (n + used - 1) / used;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(used));
  for (int t = 0; t < used; ++t) {
    const std::int64_t begin = t * chunk;
    const std::int64_t end = std::min<std::int64_t>(begin + chunk, n);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& th : pool) th.join();
}

// ".sat" tensor file: magic "SAT1" | u32 rank | rank x u32 dims | raw
// little-endian f32 payload, no padding. Round-trips bit-exactly.
void save_sat(const Tensor& t, const std::string& path);
Tensor load_sat(const std::string& path);

#ifndef NDEBUG
void debug_check_finite_impl(const float* p, std::int64_t n, const char* op);
void debug_check_finite_impl(const double* p, std::int64_t n, const char* op);
#endif

/// Debug-build assertion that an op produced only finite values.
template <typename T>
inline void debug_check_finite(const TensorT<T>& t, const char* op) {
#ifndef NDEBUG
  debug_check_finite_impl(t.ptr(), t.numel(), op);
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace saevit
