#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "kpt/tensor.hpp"

namespace kpt {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
  // elements whose true gradient is zero from dividing roundoff by zero.
  double abs_floor = 1e-6;
  // Optional filter; elements for which it returns false are skipped
  // (used to keep relu inputs away from the kink).
  std::function<bool(std::size_t input, std::size_t index)> include;
  // Skip elements whose +eps or -eps evaluation takes a different relu or
  // max-pool branch than the unperturbed one; the difference quotient then
  // straddles a kink and says nothing about the derivative.
  bool skip_branch_changes = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t branch_changes = 0;  // included in skipped
  bool passed = true;
};

/// Compares the reverse-mode gradient of the scalar program `fn` with
/// respect to every element of `inputs` against central differences
/// (f(x + eps) - f(x - eps)) / (2 eps). `fn` must read `inputs` through the
/// same handles it is given. Throws NumericError naming the input and
/// element when a perturbed evaluation is non-finite.
GradCheckResult grad_check(const std::function<TensorD()>& fn, std::vector<TensorD> inputs,
                           const GradCheckOptions& options = {});

}  // namespace kpt
