#pragma once

#include <functional>
#include <string>
#include <vector>

#include "saevit/tensor.hpp"

namespace saevit {

// Central-difference gradient checking, f64 only. The scalar loss is a
// seeded-weight dot product with the op output (a plain sum would sit in
// softmax's null space), and the relative error metric per scalar is
// |a - n| / (|a| + |n| + 1e-12).

struct GradCheckEntry {
  std::string tensor;
  double max_rel_err = 0;
  std::int64_t checked = 0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  double worst = 0;
  std::string worst_tensor;

  bool pass(double tol) const { return worst < tol; }
};

using NamedGrads = std::vector<std::pair<std::string, Tensor64>>;

/// forward() reruns the op from the current tensor values; backward(w)
/// computes analytic gradients of sum(w * forward()) for every checked
/// tensor. Tensors above `subsample` scalars are checked on a seeded sample
/// of exactly `subsample` indices. Throws VerificationError on non-finite
/// gradients.
GradCheckResult grad_check(const std::function<Tensor64()>& forward,
                           const std::function<NamedGrads(const Tensor64&)>& backward,
                           const std::vector<std::pair<std::string, Tensor64*>>& tensors,
                           double eps = 1e-5, std::int64_t subsample = 200,
                           std::uint64_t seed = 1234);

/// Named fixtures covering every primitive op, every composite block, and a
/// tiny end-to-end model.
std::vector<std::string> grad_check_targets();
GradCheckResult run_grad_check_target(const std::string& target, std::uint64_t seed = 7);
/// Pass threshold for a target ("tiny-model" is looser than single blocks).
double grad_check_tolerance(const std::string& target);

}  // namespace saevit
