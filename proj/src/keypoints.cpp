#include "kpt/keypoints.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "kpt/error.hpp"

namespace kpt {

namespace {

constexpr std::array<std::string_view, kNumJoints> kNames = {
    "r_ankle",  "r_knee",     "r_hip",   "pelvis",  "thorax", "upper_neck",
    "head_top", "r_wrist",    "r_elbow", "r_shoulder", "l_shoulder", "l_elbow",
    "l_wrist",  "l_hip",      "l_knee",  "l_ankle"};

using J = JointId;

constexpr std::array<JointId, kNumJoints> kMpii = {
    J::r_ankle, J::r_knee,   J::r_hip,    J::l_hip,     J::l_knee,     J::l_ankle,
    J::pelvis,  J::thorax,   J::upper_neck, J::head_top, J::r_wrist,  J::r_elbow,
    J::r_shoulder, J::l_shoulder, J::l_elbow, J::l_wrist};

}  // namespace

std::string_view joint_name(JointId j) { return kNames.at(code(j)); }

JointId joint_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumJoints; ++i)
    if (kNames[i] == name) return static_cast<JointId>(i);
  throw UsageError("unknown joint name '" + std::string(name) + "'");
}

JointId joint_from_code(std::size_t c) {
  if (c >= kNumJoints) throw UsageError("joint code " + std::to_string(c) + " out of range 0..15");
  return static_cast<JointId>(c);
}

const std::array<JointId, kNumJoints>& all_joints() {
  static const auto joints = [] {
    std::array<JointId, kNumJoints> a{};
    for (std::size_t i = 0; i < kNumJoints; ++i) a[i] = static_cast<JointId>(i);
    return a;
  }();
  return joints;
}

JointId mpii_joint(std::size_t index) {
  if (index >= kNumJoints) throw UsageError("MPII joint index " + std::to_string(index) + " out of range");
  return kMpii[index];
}

std::vector<JointId> sorted_subset(std::vector<JointId> joints) {
  std::sort(joints.begin(), joints.end());
  return joints;
}

void JointSubsetSplit::validate() const {
  for (const auto* s : {&s1, &s2}) {
    if (s->empty()) throw UsageError("split '" + name + "': empty subset");
    std::set<JointId> seen(s->begin(), s->end());
    if (seen.size() != s->size()) throw UsageError("split '" + name + "': duplicate joint in subset");
  }
  if (std::set<JointId>(s1.begin(), s1.end()) == std::set<JointId>(s2.begin(), s2.end()))
    throw UsageError("split '" + name + "': subsets must differ in at least one joint");
}

JointSubsetSplit builtin_split(std::string_view tag) {
  JointSubsetSplit s;
  s.name = std::string(tag);
  if (tag == "a") {
    s.s1 = {J::head_top, J::upper_neck, J::r_shoulder, J::l_shoulder, J::pelvis, J::thorax, J::r_hip, J::l_hip};
    s.s2 = {J::r_knee, J::l_knee, J::r_ankle, J::l_ankle, J::r_wrist, J::l_wrist, J::r_elbow, J::l_elbow};
  } else if (tag == "b") {
    s.s1 = {J::head_top, J::upper_neck, J::r_shoulder, J::l_shoulder, J::r_elbow, J::l_elbow, J::r_hip, J::l_hip};
    s.s2 = {J::r_knee, J::l_knee, J::r_ankle, J::l_ankle, J::r_wrist, J::l_wrist, J::pelvis, J::thorax};
  } else if (tag == "c") {
    s.s1 = {J::head_top, J::upper_neck, J::r_shoulder, J::l_shoulder, J::r_elbow, J::l_elbow, J::r_knee, J::l_knee};
    s.s2 = {J::r_wrist, J::l_wrist, J::r_ankle, J::l_ankle, J::r_hip, J::l_hip, J::pelvis, J::thorax};
  } else if (tag == "d") {
    s.s1 = {J::r_knee, J::l_knee, J::r_ankle, J::l_ankle, J::r_wrist, J::l_wrist, J::r_elbow, J::l_elbow};
    s.s2 = {J::head_top, J::upper_neck, J::r_elbow, J::l_elbow, J::r_knee, J::l_knee, J::pelvis, J::thorax};
  } else {
    throw UsageError("unknown split tag '" + std::string(tag) + "' (expected a, b, c or d)");
  }
  s.s1 = sorted_subset(std::move(s.s1));
  s.s2 = sorted_subset(std::move(s.s2));
  return s;
}

void to_json(nlohmann::json& j, const JointSubsetSplit& split) {
  auto names = [](const std::vector<JointId>& v) {
    auto a = nlohmann::json::array();
    for (auto id : v) a.push_back(joint_name(id));
    return a;
  };
  j = {{"name", split.name}, {"s1", names(split.s1)}, {"s2", names(split.s2)}};
}

void from_json(const nlohmann::json& j, JointSubsetSplit& split) {
  auto subset = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_array()) throw UsageError(std::string("split: missing array '") + key + "'");
    std::vector<JointId> v;
    for (const auto& n : j[key]) v.push_back(joint_from_name(n.get<std::string>()));
    return v;
  };
  split.name = j.value("name", std::string("custom"));
  split.s1 = subset("s1");
  split.s2 = subset("s2");
  split.validate();
  split.s1 = sorted_subset(std::move(split.s1));
  split.s2 = sorted_subset(std::move(split.s2));
}

JointSubsetSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("split file " + path.string() + ": " + e.what());
  }
  return j.get<JointSubsetSplit>();
}

void save_split(const JointSubsetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write split file " + path.string());
  out << nlohmann::json(split).dump(2) << '\n';
}

void PoseAnnotation::validate() const {
  if (!(head_len > 0.0) || !std::isfinite(head_len))
    throw UsageError("pose '" + image_id + "': head segment length must be positive");
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    if (!std::isfinite(joints[i].x) || !std::isfinite(joints[i].y))
      throw UsageError("pose '" + image_id + "': non-finite position for " +
                       std::string(kNames[i]));
  }
}

void render_heatmaps_into(const PoseAnnotation& pose, const std::vector<JointId>& subset,
                          std::size_t image_resolution, std::size_t heatmap_resolution,
                          double sigma, std::span<float> out) {
  if (heatmap_resolution == 0 || image_resolution == 0) throw UsageError("render_heatmaps: resolution must be positive");
  if (!(sigma > 0.0)) throw UsageError("render_heatmaps: sigma must be positive");
  const std::size_t hm = heatmap_resolution;
  if (out.size() != subset.size() * hm * hm) throw UsageError("render_heatmaps: output buffer size mismatch");
  const double to_hm = static_cast<double>(hm) / static_cast<double>(image_resolution);
  const double r = static_cast<double>(image_resolution);
  for (std::size_t k = 0; k < subset.size(); ++k) {
    auto map = out.subspan(k * hm * hm, hm * hm);
    std::fill(map.begin(), map.end(), 0.0f);
    const auto& kp = pose[subset[k]];
    if (!kp.visible || kp.x < 0 || kp.y < 0 || kp.x >= r || kp.y >= r) continue;
    const double jx = kp.x * to_hm, jy = kp.y * to_hm;
    for (std::size_t y = 0; y < hm; ++y) {
      const double dy = static_cast<double>(y) - jy;
      for (std::size_t x = 0; x < hm; ++x) {
        const double dx = static_cast<double>(x) - jx;
        map[y * hm + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
      }
    }
  }
}

Heatmap render_heatmaps(const PoseAnnotation& pose, const std::vector<JointId>& subset,
                        std::size_t image_resolution, std::size_t heatmap_resolution,
                        double sigma) {
  Heatmap h{subset, heatmap_resolution,
            std::vector<float>(subset.size() * heatmap_resolution * heatmap_resolution)};
  render_heatmaps_into(pose, subset, image_resolution, heatmap_resolution, sigma, h.values);
  return h;
}

DecodedJoint decode_map(std::span<const float> map, std::size_t heatmap_resolution,
                        std::size_t image_resolution) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < map.size(); ++i)
    if (map[i] > map[best]) best = i;
  const double to_img = static_cast<double>(image_resolution) / static_cast<double>(heatmap_resolution);
  return {static_cast<double>(best % heatmap_resolution) * to_img,
          static_cast<double>(best / heatmap_resolution) * to_img, static_cast<double>(map[best])};
}

std::vector<DecodedJoint> decode_heatmaps(const Heatmap& h, std::size_t image_resolution) {
  std::vector<DecodedJoint> out;
  for (std::size_t k = 0; k < h.joints.size(); ++k)
    out.push_back(decode_map(h.map(k), h.resolution, image_resolution));
  return out;
}

Affine2 Affine2::inverse() const {
  const double det = a00 * a11 - a01 * a10;
  if (det == 0.0) throw NumericError("singular affine map");
  Affine2 r;
  r.a00 = a11 / det;
  r.a01 = -a01 / det;
  r.a10 = -a10 / det;
  r.a11 = a00 / det;
  r.tx = -(r.a00 * tx + r.a01 * ty);
  r.ty = -(r.a10 * tx + r.a11 * ty);
  return r;
}

double Affine2::scale() const { return std::sqrt(std::abs(a00 * a11 - a01 * a10)); }

Affine2 augmentation_affine(double scale, double rotation_degrees, std::size_t resolution) {
  if (!(scale > 0.0)) throw UsageError("transform scale must be positive");
  const double th = rotation_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th) * scale, s = std::sin(th) * scale;
  const double ctr = (static_cast<double>(resolution) - 1.0) / 2.0;
  Affine2 m;
  m.a00 = c;
  m.a01 = -s;
  m.a10 = s;
  m.a11 = c;
  m.tx = ctr - (c * ctr - s * ctr);
  m.ty = ctr - (s * ctr + c * ctr);
  return m;
}

PoseAnnotation transform_pose(const PoseAnnotation& pose, const Affine2& m,
                              std::size_t resolution) {
  PoseAnnotation out = pose;
  const double r = static_cast<double>(resolution);
  for (auto& kp : out.joints) {
    double x = 0, y = 0;
    m.apply(kp.x, kp.y, x, y);
    kp.x = x;
    kp.y = y;
    if (x < 0 || y < 0 || x >= r || y >= r) kp.visible = false;
  }
  out.head_len = pose.head_len * m.scale();
  return out;
}

PoseAnnotation transform_pose(const PoseAnnotation& pose, double scale, double rotation_degrees,
                              std::size_t resolution) {
  return transform_pose(pose, augmentation_affine(scale, rotation_degrees, resolution), resolution);
}

}  // namespace kpt
