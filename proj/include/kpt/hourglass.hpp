#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpt/ops.hpp"
#include "kpt/tensor.hpp"

namespace kpt {

/// Shape of a stacked hourglass network. The stem downsamples by 4, so
/// heatmap_resolution == input_resolution / 4, and each unit pools
/// `depth` times down to heatmap_resolution / 2^depth.
struct HourglassArch {
  std::size_t num_stacks = 2;
  std::size_t depth = 2;
  std::size_t base_channels = 8;
  std::size_t input_resolution = 32;
  std::size_t heatmap_resolution = 8;
  std::size_t num_output_channels = 8;

  void validate() const;
  std::size_t bottleneck_resolution() const { return heatmap_resolution >> depth; }
  bool operator==(const HourglassArch&) const = default;
};

void to_json(nlohmann::json& j, const HourglassArch& arch);
void from_json(const nlohmann::json& j, HourglassArch& arch);

enum class NetMode { train, eval };

template <class T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
  bool is_buffer = false;  // batchnorm running statistics
};

namespace detail {
template <class T>
struct Unit;
template <class T>
struct Stem;
}  // namespace detail

/// Stem (4x4 stride-2 conv, batchnorm, relu, residual, maxpool) followed by
/// `num_stacks` hourglass units. Every unit ends in a 1x1 heatmap head;
/// non-final units also own 1x1 remaps of their features and heatmaps that
/// are added back into the next unit's input.
///
/// Parameter names are `stem.*` and `unit<k>.*` with k counted from 0.
template <class T>
class StackedHourglassNet {
 public:
  StackedHourglassNet();
  ~StackedHourglassNet();
  StackedHourglassNet(StackedHourglassNet&&) noexcept;
  StackedHourglassNet& operator=(StackedHourglassNet&&) noexcept;

  /// Deterministic construction; each tensor is drawn from a stream keyed by
  /// (seed, tensor name). `head_channels` overrides the per-unit head width
  /// (defaults to arch.num_output_channels for every unit).
  static StackedHourglassNet build(const HourglassArch& arch, std::uint64_t seed,
                                   std::vector<std::size_t> head_channels = {});

  /// Deep copy with identical values, frozen set and mode.
  StackedHourglassNet clone() const;

  const HourglassArch& arch() const { return arch_; }
  const std::vector<std::size_t>& head_channels() const { return head_channels_; }

  /// One heatmap tensor per unit, in stacking order, each
  /// [B, head_channels[u], heatmap_resolution, heatmap_resolution].
  std::vector<BasicTensor<T>> forward(const BasicTensor<T>& batch);

  void set_mode(NetMode mode) { mode_ = mode; }
  NetMode mode() const { return mode_; }

  /// Parameters and buffers in construction order.
  const std::vector<NamedTensor<T>>& tensors() const { return tensors_; }
  std::vector<NamedTensor<T>> parameters() const;
  BasicTensor<T> find(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Swaps unit `unit`'s head (and its heatmap remap, when present) for a
  /// freshly initialized one with `channels` outputs.
  void replace_head(std::size_t unit, std::size_t channels, std::uint64_t seed);

  /// Marks exactly `names` as frozen: no gradient is recorded for them and
  /// batchnorms whose affine parameters are frozen use running statistics
  /// and never update them.
  void set_frozen(const std::set<std::string>& names);
  const std::set<std::string>& frozen() const { return frozen_; }

  void zero_grad();

 private:
  void register_tensor(const std::string& name, BasicTensor<T> tensor, bool is_buffer);

  HourglassArch arch_;
  std::vector<std::size_t> head_channels_;
  NetMode mode_ = NetMode::train;
  std::unique_ptr<detail::Stem<T>> stem_;
  std::vector<std::unique_ptr<detail::Unit<T>>> units_;
  std::vector<NamedTensor<T>> tensors_;
  std::set<std::string> frozen_;
};

extern template class StackedHourglassNet<float>;
extern template class StackedHourglassNet<double>;

using HourglassNet = StackedHourglassNet<float>;

/// Parameter count implied by an architecture with uniform heads.
std::size_t parameter_count(const HourglassArch& arch);

/// Name prefix of unit `k` ("unit<k>.").
std::string unit_prefix(std::size_t unit);

}  // namespace kpt
