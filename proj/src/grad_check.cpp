#include "kpt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kpt/ops.hpp"

namespace kpt {

namespace {

double evaluate(const std::function<TensorD()>& fn, std::size_t input, std::size_t index,
                std::uint64_t* branch = nullptr) {
  NoGradGuard no_grad;
  BranchFingerprint fp;
  const double value = fn().item();
  if (branch) *branch = fp.value();
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "grad_check: non-finite output " << value << " while perturbing input " << input
       << " element " << index;
    throw NumericError(os.str());
  }
  return value;
}

}  // namespace

GradCheckResult grad_check(const std::function<TensorD()>& fn, std::vector<TensorD> inputs,
                           const GradCheckOptions& options) {
  for (auto& in : inputs) {
    check_finite(in, "grad_check input");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  std::uint64_t base_branch = 0;
  if (options.skip_branch_changes) evaluate(fn, 0, 0, &base_branch);
  auto loss = fn();
  check_finite(loss, "grad_check output");
  loss.backward();

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& in = inputs[i];
    const std::vector<double> analytic = in.has_grad()
                                             ? std::vector<double>(in.grad().begin(), in.grad().end())
                                             : std::vector<double>(in.numel(), 0.0);
    auto values = in.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (options.include && !options.include(i, j)) {
        ++result.skipped;
        continue;
      }
      const double original = values[j];
      std::uint64_t plus_branch = 0, minus_branch = 0;
      values[j] = original + options.epsilon;
      const double plus = evaluate(fn, i, j, &plus_branch);
      values[j] = original - options.epsilon;
      const double minus = evaluate(fn, i, j, &minus_branch);
      values[j] = original;
      if (options.skip_branch_changes &&
          (plus_branch != base_branch || minus_branch != base_branch)) {
        ++result.skipped;
        ++result.branch_changes;
        continue;
      }

      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double denom =
          std::max({std::abs(analytic[j]), std::abs(numeric), options.abs_floor});
      const double err = std::abs(analytic[j] - numeric) / denom;
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = i;
        result.worst_index = j;
        result.worst_analytic = analytic[j];
        result.worst_numeric = numeric;
      }
    }
  }
  result.passed = result.max_rel_error < options.tolerance;
  return result;
}

}  // namespace kpt
