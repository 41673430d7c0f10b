#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kpt/image.hpp"
#include "kpt/keypoints.hpp"

namespace kpt {

inline constexpr int kDatasetFormatVersion = 1;

struct Sample {
  Image image;  // [3, R, R], values k/255
  PoseAnnotation pose;
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t resolution = 0;
  std::vector<Sample> samples;
  nlohmann::json provenance;

  std::size_t size() const { return samples.size(); }
  void validate() const;
};

/// Limb colours of the synthetic figures.
enum class LimbSide { torso, right, left };

struct Bone {
  JointId parent;
  JointId child;
  LimbSide side;
};

/// The 15 bones of the synthetic skeleton in drawing order.
const std::vector<Bone>& synthetic_bones();

/// Channel carrying full intensity for a side: right 0 (red), left 1
/// (green), torso 2 (blue).
std::size_t side_channel(LimbSide side);

/// One stick figure; a pure function of (seed, index, resolution).
Sample synthetic_sample(std::uint64_t seed, std::size_t index, std::size_t resolution);
Dataset generate_synthetic(std::uint64_t seed, std::size_t count, std::size_t resolution);

/// 0.6 x diagonal of the head rectangle.
double mpii_head_length(double x1, double y1, double x2, double y2);

/// Reads a JSON array of person records
///   {image, joints: [[x, y, visible] x 16], center: [x, y], scale, head_rect: [x1, y1, x2, y2]}
/// with joints in MPII index order. Each person is cropped to a square of
/// side 200 * scale around `center` and resampled to `resolution`.
Dataset load_mpii(const std::filesystem::path& annotation_file,
                  const std::filesystem::path& image_dir, std::size_t resolution);

/// Seeded shuffle; the last `val_count` shuffled samples form the
/// validation set.
std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, std::size_t val_count,
                                            std::uint64_t seed);

/// Directory with manifest.json and images/<index>.c{0,1,2}.pgm.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace kpt
