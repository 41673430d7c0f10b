#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "kpt/tensor.hpp"

// Differentiable operations. Only the shape patterns a stacked hourglass
// needs are supported; there is no general broadcasting.
namespace kpt {

/// While alive, folds every relu sign pattern and max-pool selection
/// evaluated on this thread into a fingerprint. Two evaluations with equal
/// fingerprints took the same branch through every nondifferentiable op.
class BranchFingerprint {
 public:
  BranchFingerprint();
  ~BranchFingerprint();
  BranchFingerprint(const BranchFingerprint&) = delete;
  BranchFingerprint& operator=(const BranchFingerprint&) = delete;
  std::uint64_t value() const { return value_; }
  void fold(std::uint64_t v) { value_ = (value_ ^ v) * 0x100000001b3ULL; }
  BranchFingerprint* previous() const { return previous_; }

 private:
  std::uint64_t value_ = 0x84222325cbf29ce4ULL;
  BranchFingerprint* previous_;
};

/// Cross-correlation (no kernel flip) of input [N,C,H,W] with kernel
/// [F,C,kh,kw] plus a per-filter bias [F]. Output extents must divide
/// exactly: (H + 2*padding - kh) % stride == 0.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

template <class T>
struct MaxPoolResult {
  BasicTensor<T> output;
  // Flat input index selected for each output element.
  std::vector<std::size_t> argmax;
};

/// 2x2 / stride-2 max pooling. Ties go to the first element in row-major
/// window order.
template <class T>
MaxPoolResult<T> maxpool2(const BasicTensor<T>& input);

template <class T>
BasicTensor<T> upsample_nearest2(const BasicTensor<T>& input);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Elementwise sum of two tensors with identical shapes.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Elementwise multiplication by a constant.
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor);

/// Sum of all elements, as a scalar.
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& input);

/// Mean of squared differences over all elements, as a scalar.
template <class T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

enum class BatchNormMode { train, eval };

/// Per-channel running statistics, updated in place by train-mode calls.
template <class T>
struct BatchNormStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;

  static BatchNormStats fresh(std::size_t channels) {
    return {BasicTensor<T>::zeros({channels}), BasicTensor<T>::full({channels}, T(1))};
  }
};

/// Train mode normalizes each channel over N,H,W with the biased batch
/// variance and folds the batch statistics into `stats`:
///   running = (1 - momentum) * running + momentum * batch
/// (unbiased variance for the running estimate). Eval mode normalizes
/// with the running statistics and leaves them untouched.
template <class T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormStats<T>& stats, T eps,
                           T momentum, BatchNormMode mode);

}  // namespace kpt
