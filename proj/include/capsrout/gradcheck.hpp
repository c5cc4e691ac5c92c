#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsrout/model.hpp"

namespace capsrout {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 17;
  // Op checks only: random instances per op.
  std::size_t trials = 20;
  // Fault injection: the analytic gradient of this group is perturbed
  // before comparison so the harness can be shown to catch it.
  std::string corrupt_group;
};

struct GroupResult {
  std::string group;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  bool passed() const;
};

// |analytic - fd| / max(1, |fd|) with fd the central difference.
double relative_error(double analytic, double numeric);

// Central differences of `loss` over every entry of every parameter group,
// compared with accumulate_gradient at the same point.
GradCheckReport check_model_gradients(const Model<double>& model, const Tensor<double>& image, int label,
                                      const GradCheckOptions& options);

// End-to-end checks on the small configurations (random image, fixed seed).
GradCheckReport gradcheck_capsnet_tiny(const GradCheckOptions& options);
GradCheckReport gradcheck_cnn_shrunken(const GradCheckOptions& options);

// Every differentiable tensor-core and capsule op on random instances of at
// most 200 elements; one group per (op, input).
GradCheckReport gradcheck_ops(const GradCheckOptions& options);

}  // namespace capsrout
