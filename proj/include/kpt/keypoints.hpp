#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace kpt {

enum class JointId : std::uint8_t {
  r_ankle = 0,
  r_knee,
  r_hip,
  pelvis,
  thorax,
  upper_neck,
  head_top,
  r_wrist,
  r_elbow,
  r_shoulder,
  l_shoulder,
  l_elbow,
  l_wrist,
  l_hip,
  l_knee,
  l_ankle,
};

inline constexpr std::size_t kNumJoints = 16;

inline std::size_t code(JointId j) { return static_cast<std::size_t>(j); }
std::string_view joint_name(JointId j);
JointId joint_from_name(std::string_view name);
JointId joint_from_code(std::size_t code);
const std::array<JointId, kNumJoints>& all_joints();

/// JointId for position `index` of an MPII joint array
/// (0 r_ankle, 1 r_knee, 2 r_hip, 3 l_hip, 4 l_knee, 5 l_ankle, 6 pelvis,
/// 7 thorax, 8 upper_neck, 9 head_top, 10 r_wrist, 11 r_elbow,
/// 12 r_shoulder, 13 l_shoulder, 14 l_elbow, 15 l_wrist).
JointId mpii_joint(std::size_t index);

/// Two joint subsets, each kept in ascending code order.
struct JointSubsetSplit {
  std::string name;
  std::vector<JointId> s1;
  std::vector<JointId> s2;

  void validate() const;
};

JointSubsetSplit builtin_split(std::string_view tag);
std::vector<JointId> sorted_subset(std::vector<JointId> joints);

void to_json(nlohmann::json& j, const JointSubsetSplit& split);
void from_json(const nlohmann::json& j, JointSubsetSplit& split);
JointSubsetSplit load_split(const std::filesystem::path& path);
void save_split(const JointSubsetSplit& split, const std::filesystem::path& path);

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = false;
  bool operator==(const Keypoint&) const = default;
};

/// Joint positions in image pixels; pixel (i, j) has its center at x = i, y = j.
struct PoseAnnotation {
  std::array<Keypoint, kNumJoints> joints{};
  double head_len = 1.0;
  std::string image_id;

  const Keypoint& operator[](JointId j) const { return joints[code(j)]; }
  Keypoint& operator[](JointId j) { return joints[code(j)]; }
  void validate() const;
  bool operator==(const PoseAnnotation&) const = default;
};

/// Per-joint maps [joints.size(), resolution, resolution], row-major.
struct Heatmap {
  std::vector<JointId> joints;
  std::size_t resolution = 0;
  std::vector<float> values;

  std::span<const float> map(std::size_t k) const {
    return {values.data() + k * resolution * resolution, resolution * resolution};
  }
};

/// Unnormalized Gaussians exp(-|p - j|^2 / (2 sigma^2)) centred on each joint
/// scaled by heatmap_resolution / image_resolution. Invisible joints and
/// joints outside [0, image_resolution) give all-zero maps.
Heatmap render_heatmaps(const PoseAnnotation& pose, const std::vector<JointId>& subset,
                        std::size_t image_resolution, std::size_t heatmap_resolution,
                        double sigma = 1.0);

/// Same, written into `out` (joints.size() * hm * hm floats).
void render_heatmaps_into(const PoseAnnotation& pose, const std::vector<JointId>& subset,
                          std::size_t image_resolution, std::size_t heatmap_resolution,
                          double sigma, std::span<float> out);

struct DecodedJoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;
};

/// Argmax of one map (first in row-major order on ties), scaled to image
/// pixels. An all-zero map decodes to the origin with confidence 0.
DecodedJoint decode_map(std::span<const float> map, std::size_t heatmap_resolution,
                        std::size_t image_resolution);

std::vector<DecodedJoint> decode_heatmaps(const Heatmap& h, std::size_t image_resolution);

/// p -> a * p + t, 2x2 matrix a row-major.
struct Affine2 {
  double a00 = 1, a01 = 0, a10 = 0, a11 = 1;
  double tx = 0, ty = 0;

  void apply(double x, double y, double& ox, double& oy) const {
    ox = a00 * x + a01 * y + tx;
    oy = a10 * x + a11 * y + ty;
  }
  Affine2 inverse() const;
  double scale() const;  // sqrt(|det|)
};

/// Rotation by `rotation_degrees` and scaling by `scale` about the image
/// centre ((R - 1) / 2, (R - 1) / 2). In y-down pixel coordinates a positive
/// angle takes (cx + d, cy) to (cx, cy + d), i.e. clockwise on screen.
Affine2 augmentation_affine(double scale, double rotation_degrees, std::size_t resolution);

/// Maps every joint through `m`, multiplies head_len by m.scale(), and
/// marks joints landing outside [0, resolution) invisible.
PoseAnnotation transform_pose(const PoseAnnotation& pose, const Affine2& m,
                              std::size_t resolution);
PoseAnnotation transform_pose(const PoseAnnotation& pose, double scale, double rotation_degrees,
                              std::size_t resolution);

}  // namespace kpt
