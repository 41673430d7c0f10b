#include "kpt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

#include "kpt/error.hpp"
#include "kpt/random.hpp"

namespace kpt {

namespace {

using J = JointId;

struct Vec2 {
  double x, y;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double k, Vec2 a) { return {k * a.x, k * a.y}; }

// Unit vector at `deg` degrees clockwise from straight down (y-down frame).
Vec2 dir(double deg) {
  const double t = deg * std::numbers::pi / 180.0;
  return {-std::sin(t), std::cos(t)};
}

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a, ap = p - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  double t = len2 > 0 ? (ap.x * ab.x + ap.y * ab.y) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 d = p - (a + t * ab);
  return std::hypot(d.x, d.y);
}

std::array<float, 3> side_colour(LimbSide side) {
  switch (side) {
    case LimbSide::right: return {1.0f, 0.0f, 0.0f};
    case LimbSide::left: return {0.0f, 1.0f, 0.0f};
    case LimbSide::torso: break;
  }
  return {0.0f, 0.0f, 1.0f};
}

void paint(Image& img, std::size_t x, std::size_t y, double coverage, const std::array<float, 3>& colour) {
  if (coverage <= 0) return;
  for (std::size_t c = 0; c < 3; ++c) {
    const double old = img.at(c, y, x);
    img.at(c, y, x) = static_cast<float>(old * (1.0 - coverage) + colour[c] * coverage);
  }
}

std::string require_msg(std::size_t record, const char* field) {
  return "annotation record " + std::to_string(record) + ": missing or invalid field '" + field + "'";
}

const nlohmann::json& require(const nlohmann::json& rec, std::size_t index, const char* field) {
  if (!rec.is_object() || !rec.contains(field)) throw InconsistentError(require_msg(index, field));
  return rec[field];
}

std::vector<double> numbers(const nlohmann::json& v, std::size_t n, std::size_t index, const char* field) {
  if (!v.is_array() || v.size() != n) throw InconsistentError(require_msg(index, field));
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw InconsistentError(require_msg(index, field));
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (samples.empty()) throw InconsistentError("dataset must contain at least one sample");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& img = samples[i].image;
    if (img.channels != 3 || img.height != resolution || img.width != resolution)
      throw InconsistentError("sample " + std::to_string(i) + " does not match dataset resolution " +
                              std::to_string(resolution));
    samples[i].pose.validate();
  }
}

const std::vector<Bone>& synthetic_bones() {
  static const std::vector<Bone> bones = {
      {J::pelvis, J::thorax, LimbSide::torso},       {J::thorax, J::upper_neck, LimbSide::torso},
      {J::upper_neck, J::head_top, LimbSide::torso}, {J::pelvis, J::l_hip, LimbSide::left},
      {J::l_hip, J::l_knee, LimbSide::left},         {J::l_knee, J::l_ankle, LimbSide::left},
      {J::thorax, J::l_shoulder, LimbSide::left},    {J::l_shoulder, J::l_elbow, LimbSide::left},
      {J::l_elbow, J::l_wrist, LimbSide::left},      {J::pelvis, J::r_hip, LimbSide::right},
      {J::r_hip, J::r_knee, LimbSide::right},        {J::r_knee, J::r_ankle, LimbSide::right},
      {J::thorax, J::r_shoulder, LimbSide::right},   {J::r_shoulder, J::r_elbow, LimbSide::right},
      {J::r_elbow, J::r_wrist, LimbSide::right},
  };
  return bones;
}

std::size_t side_channel(LimbSide side) {
  switch (side) {
    case LimbSide::right: return 0;
    case LimbSide::left: return 1;
    case LimbSide::torso: break;
  }
  return 2;
}

Sample synthetic_sample(std::uint64_t seed, std::size_t index, std::size_t resolution) {
  if (resolution < 16)
    throw UsageError("synthetic resolution " + std::to_string(resolution) + " is too small (minimum 16)");
  Rng rng(derive_seed({seed, index, 0x51A7}));
  auto len = [&](double base) { return base * rng.uniform(0.85, 1.15); };

  // Forward kinematics in figure units; the figure faces the viewer, so its
  // right side is on the image's left.
  std::array<Vec2, kNumJoints> p{};
  auto at = [&](JointId j) -> Vec2& { return p[code(j)]; };
  const double lean = rng.uniform(-25, 25);
  const Vec2 up = -1.0 * dir(lean);
  const Vec2 across = {-up.y, up.x};  // figure's left: image right when upright
  at(J::pelvis) = {0, 0};
  at(J::thorax) = at(J::pelvis) + len(1.0) * up;
  const double neck = lean + 180 + rng.uniform(-15, 15);
  at(J::upper_neck) = at(J::thorax) + len(0.22) * dir(neck);
  at(J::head_top) = at(J::upper_neck) + len(0.3) * dir(neck + rng.uniform(-15, 15));
  const double hip_w = len(0.2), shoulder_w = len(0.3);
  at(J::r_hip) = at(J::pelvis) - hip_w * across;
  at(J::l_hip) = at(J::pelvis) + hip_w * across;
  at(J::r_shoulder) = at(J::thorax) - shoulder_w * across;
  at(J::l_shoulder) = at(J::thorax) + shoulder_w * across;
  auto limb = [&](JointId root, JointId mid, JointId end, double spread, double bend, double l1, double l2) {
    const double a = lean + rng.uniform(-spread, spread);
    at(mid) = at(root) + len(l1) * dir(a);
    at(end) = at(mid) + len(l2) * dir(a + rng.uniform(-bend, bend));
  };
  limb(J::r_hip, J::r_knee, J::r_ankle, 40, 60, 0.75, 0.7);
  limb(J::l_hip, J::l_knee, J::l_ankle, 40, 60, 0.75, 0.7);
  limb(J::r_shoulder, J::r_elbow, J::r_wrist, 120, 110, 0.5, 0.45);
  limb(J::l_shoulder, J::l_elbow, J::l_wrist, 120, 110, 0.5, 0.45);

  // Fit the figure (joints and head disc) into the frame.
  const Vec2 head_c = 0.5 * (at(J::upper_neck) + at(J::head_top));
  const Vec2 hd = at(J::head_top) - at(J::upper_neck);
  const double head_r = 0.5 * std::hypot(hd.x, hd.y);
  double x0 = head_c.x - head_r, x1 = head_c.x + head_r, y0 = head_c.y - head_r, y1 = head_c.y + head_r;
  for (const auto& q : p) {
    x0 = std::min(x0, q.x);
    x1 = std::max(x1, q.x);
    y0 = std::min(y0, q.y);
    y1 = std::max(y1, q.y);
  }
  const double span = static_cast<double>(resolution - 1);
  const double k = rng.uniform(0.55, 0.8) * span / std::max(x1 - x0, y1 - y0);
  const double ox = rng.uniform(0, span - k * (x1 - x0)) - k * x0;
  const double oy = rng.uniform(0, span - k * (y1 - y0)) - k * y0;
  for (auto& q : p) q = {k * q.x + ox, k * q.y + oy};

  // Smooth textured background below full limb intensity.
  auto img = Image::zeros(3, resolution, resolution);
  for (std::size_t c = 0; c < 3; ++c) {
    const double fx = rng.uniform(0.2, 0.9), fy = rng.uniform(0.2, 0.9);
    const double px = rng.uniform(0, 6.3), py = rng.uniform(0, 6.3);
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x)
        img.at(c, y, x) = static_cast<float>(0.15 + 0.08 * std::sin(fx * static_cast<double>(x) + px) *
                                                        std::cos(fy * static_cast<double>(y) + py) +
                                             0.05 * rng.uniform());
  }

  const Vec2 hc = {k * head_c.x + ox, k * head_c.y + oy};
  const double hr = k * head_r;
  for (std::size_t y = 0; y < resolution; ++y)
    for (std::size_t x = 0; x < resolution; ++x) {
      const double d = std::hypot(static_cast<double>(x) - hc.x, static_cast<double>(y) - hc.y);
      paint(img, x, y, std::clamp(hr + 0.5 - d, 0.0, 1.0), {0.6f, 0.6f, 0.6f});
    }
  for (const auto& b : synthetic_bones()) {
    const auto colour = side_colour(b.side);
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x) {
        const double d = segment_distance({static_cast<double>(x), static_cast<double>(y)}, at(b.parent), at(b.child));
        paint(img, x, y, std::clamp(1.5 - d, 0.0, 1.0), colour);
      }
  }
  quantize_255(img.data);

  Sample s;
  s.image = std::move(img);
  for (std::size_t j = 0; j < kNumJoints; ++j) s.pose.joints[j] = {p[j].x, p[j].y, true};
  s.pose.head_len = 2.0 * hr;
  s.pose.image_id = "synthetic-" + std::to_string(seed) + "-" + std::to_string(index);
  return s;
}

Dataset generate_synthetic(std::uint64_t seed, std::size_t count, std::size_t resolution) {
  if (count == 0) throw UsageError("synthetic dataset count must be positive");
  if (resolution < 16)
    throw UsageError("synthetic resolution " + std::to_string(resolution) + " is too small (minimum 16)");
  Dataset d;
  d.resolution = resolution;
  d.provenance = {{"kind", "synthetic"}, {"seed", seed}, {"count", count}, {"resolution", resolution}};
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(synthetic_sample(seed, i, resolution));
  return d;
}

double mpii_head_length(double x1, double y1, double x2, double y2) {
  return 0.6 * std::hypot(x2 - x1, y2 - y1);
}

Dataset load_mpii(const std::filesystem::path& annotation_file,
                  const std::filesystem::path& image_dir, std::size_t resolution) {
  if (resolution == 0) throw UsageError("MPII crop resolution must be positive");
  std::ifstream in(annotation_file);
  if (!in) throw IoError("cannot open annotation file " + annotation_file.string());
  nlohmann::json records;
  try {
    in >> records;
  } catch (const nlohmann::json::exception& e) {
    throw InconsistentError("annotation file " + annotation_file.string() + ": " + e.what());
  }
  if (!records.is_array()) throw InconsistentError("annotation file must hold a JSON array of records");
  if (records.empty()) throw InconsistentError("annotation file " + annotation_file.string() + " has no records");

  Dataset d;
  d.resolution = resolution;
  d.provenance = {{"kind", "mpii"},
                  {"annotation_file", annotation_file.string()},
                  {"image_dir", image_dir.string()},
                  {"resolution", resolution}};
  const double r = static_cast<double>(resolution);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    const auto& image_field = require(rec, i, "image");
    if (!image_field.is_string()) throw InconsistentError(require_msg(i, "image"));
    const auto& joints = require(rec, i, "joints");
    if (!joints.is_array() || joints.size() != kNumJoints) throw InconsistentError(require_msg(i, "joints"));
    const auto center = numbers(require(rec, i, "center"), 2, i, "center");
    const auto& scale_field = require(rec, i, "scale");
    if (!scale_field.is_number() || !(scale_field.get<double>() > 0)) throw InconsistentError(require_msg(i, "scale"));
    const auto rect = numbers(require(rec, i, "head_rect"), 4, i, "head_rect");

    const double side = 200.0 * scale_field.get<double>();
    const double k = r / side;
    const double ctr = (r - 1.0) / 2.0;
    Affine2 m;
    m.a00 = k;
    m.a11 = k;
    m.tx = ctr - k * center[0];
    m.ty = ctr - k * center[1];

    const auto src = read_image(image_dir / image_field.get<std::string>());
    Sample s;
    s.image = warp_affine(src, m, resolution, resolution);
    quantize_255(s.image.data);
    PoseAnnotation pose;
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const auto v = numbers(joints[j], 3, i, "joints");
      auto& kp = pose[mpii_joint(j)];
      kp = {v[0], v[1], v[2] != 0 && v[0] >= 0 && v[1] >= 0};
    }
    pose.head_len = mpii_head_length(rect[0], rect[1], rect[2], rect[3]);
    if (!(pose.head_len > 0)) throw InconsistentError(require_msg(i, "head_rect"));
    pose.image_id = image_field.get<std::string>() + "#" + std::to_string(i);
    s.pose = transform_pose(pose, m, resolution);
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, std::size_t val_count,
                                            std::uint64_t seed) {
  if (val_count == 0 || val_count >= dataset.size())
    throw UsageError("validation count " + std::to_string(val_count) + " must be in 1.." +
                     std::to_string(dataset.size() > 0 ? dataset.size() - 1 : 0));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, 0x7A11}));
  rng.shuffle(order);
  std::pair<Dataset, Dataset> out;
  for (auto* part : {&out.first, &out.second}) {
    part->resolution = dataset.resolution;
    part->provenance = dataset.provenance;
  }
  const std::size_t cut = dataset.size() - val_count;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < cut ? out.first : out.second).samples.push_back(dataset.samples[order[i]]);
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest = {{"version", kDatasetFormatVersion},
                             {"resolution", dataset.resolution},
                             {"count", dataset.size()},
                             {"provenance", dataset.provenance}};
  auto samples = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu", i);
    for (std::size_t c = 0; c < 3; ++c)
      write_pgm(dir / (std::string(name) + ".c" + std::to_string(c) + ".pgm"), s.image, c);
    auto joints = nlohmann::json::array();
    for (std::size_t j = 0; j < kNumJoints; ++j)
      joints.push_back({{"id", j}, {"x", s.pose.joints[j].x}, {"y", s.pose.joints[j].y},
                        {"visible", s.pose.joints[j].visible}});
    samples.push_back({{"image_path", name}, {"image_id", s.pose.image_id}, {"joints", joints},
                       {"head_len", s.pose.head_len}});
  }
  manifest["samples"] = std::move(samples);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset manifest " + path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset manifest " + path.string() + " is damaged or partially written: " + e.what());
  }
  try {
    const int version = m.at("version").get<int>();
    if (version != kDatasetFormatVersion)
      throw InconsistentError("dataset format version " + std::to_string(version) +
                              " does not match supported version " + std::to_string(kDatasetFormatVersion));
    Dataset d;
    d.resolution = m.at("resolution").get<std::size_t>();
    d.provenance = m.at("provenance");
    const auto& samples = m.at("samples");
    if (samples.size() != m.at("count").get<std::size_t>())
      throw IoError("dataset manifest " + path.string() + " lists " + std::to_string(samples.size()) +
                    " samples but declares " + std::to_string(m.at("count").get<std::size_t>()));
    for (const auto& rec : samples) {
      Sample s;
      s.image = Image::zeros(3, d.resolution, d.resolution);
      const auto base = rec.at("image_path").get<std::string>();
      for (std::size_t c = 0; c < 3; ++c) {
        std::size_t w = 0, h = 0;
        const auto bytes = read_pgm(dir / (base + ".c" + std::to_string(c) + ".pgm"), w, h);
        if (w != d.resolution || h != d.resolution)
          throw InconsistentError("image " + base + " has size " + std::to_string(w) + "x" +
                                  std::to_string(h) + ", expected " + std::to_string(d.resolution));
        for (std::size_t i = 0; i < bytes.size(); ++i) s.image.data[c * w * h + i] = from_byte(bytes[i]);
      }
      for (const auto& j : rec.at("joints")) {
        const auto id = joint_from_code(j.at("id").get<std::size_t>());
        s.pose[id] = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("visible").get<bool>()};
      }
      s.pose.head_len = rec.at("head_len").get<double>();
      s.pose.image_id = rec.value("image_id", base);
      d.samples.push_back(std::move(s));
    }
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset manifest " + path.string() + " is malformed: " + e.what());
  }
}

}  // namespace kpt
