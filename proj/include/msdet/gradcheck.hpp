#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msdet/tensor.hpp"

namespace msdet {

struct GradcheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // near-zero gradients from turning round-off into large ratios.
  double floor = 1e-3;
  // 0 checks every element; otherwise a seeded random subset per input.
  std::size_t max_checks_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  bool passed = false;
  std::size_t checked = 0;
  std::string worst;  // "input k element i: autodiff A vs numeric N"
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `inputs` must be leaf tensors that require gradients; their
/// values are perturbed in place and restored.
GradcheckReport gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, const GradcheckOptions& opts = {});

}  // namespace msdet
