#include "kpt/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "kpt/error.hpp"

namespace kpt {

using J = JointId;

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"train_loss", r.train_loss},
       {"val_accuracy", r.val_accuracy},
       {"learning_rate", r.learning_rate}};
  if (r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.wall_seconds.reset();
  if (j.contains("wall_seconds")) r.wall_seconds = j["wall_seconds"].get<double>();
}

std::string to_string(Normalization n) {
  switch (n) {
    case Normalization::head: return "head";
    case Normalization::bbox: return "bbox";
    case Normalization::heatmap_tenth: break;
  }
  return "heatmap_tenth";
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "head") return Normalization::head;
  if (s == "bbox") return Normalization::bbox;
  if (s == "heatmap_tenth") return Normalization::heatmap_tenth;
  throw UsageError("unknown normalization '" + s + "' (expected head, bbox or heatmap_tenth)");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string MetricSpec::name() const {
  if (normalization == Normalization::head) return "PCKh@" + format_double(threshold);
  return "PCK@" + format_double(threshold) + "(" + to_string(normalization) + ")";
}

const GroupScore* MetricReport::group(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return &g;
  return nullptr;
}

const std::vector<std::pair<std::string, std::vector<JointId>>>& joint_groups() {
  static const std::vector<std::pair<std::string, std::vector<JointId>>> groups = {
      {"Head", {J::head_top, J::upper_neck}},   {"Shoulder", {J::r_shoulder, J::l_shoulder}},
      {"Elbow", {J::r_elbow, J::l_elbow}},      {"Wrist", {J::r_wrist, J::l_wrist}},
      {"Hip", {J::r_hip, J::l_hip}},            {"Knee", {J::r_knee, J::l_knee}},
      {"Ankle", {J::r_ankle, J::l_ankle}},      {"Pelvis", {J::pelvis}},
      {"Thorax", {J::thorax}},
  };
  return groups;
}

namespace {

std::optional<double> percent(std::size_t correct, std::size_t total) {
  if (total == 0) return std::nullopt;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

double normalizer(const PoseAnnotation& pose, const MetricSpec& spec, std::size_t sample) {
  switch (spec.normalization) {
    case Normalization::head:
      if (!(pose.head_len > 0))
        throw UsageError("sample " + std::to_string(sample) + ": head segment length must be positive");
      return pose.head_len;
    case Normalization::bbox: {
      double x0 = INFINITY, y0 = INFINITY, x1 = -INFINITY, y1 = -INFINITY;
      for (const auto& kp : pose.joints) {
        if (!kp.visible) continue;
        x0 = std::min(x0, kp.x);
        y0 = std::min(y0, kp.y);
        x1 = std::max(x1, kp.x);
        y1 = std::max(y1, kp.y);
      }
      const double size = std::max(x1 - x0, y1 - y0);
      if (!(size > 0) || !std::isfinite(size))
        throw UsageError("sample " + std::to_string(sample) + ": bounding box of visible joints is empty");
      return size;
    }
    case Normalization::heatmap_tenth:
      break;
  }
  if (spec.image_resolution == 0 || spec.heatmap_resolution == 0)
    throw UsageError("heatmap_tenth normalization needs image and heatmap resolutions");
  // heatmap_resolution / 10 heatmap pixels, expressed in image pixels.
  return static_cast<double>(spec.heatmap_resolution) / 10.0 *
         (static_cast<double>(spec.image_resolution) / static_cast<double>(spec.heatmap_resolution));
}

}  // namespace

MetricReport pck(const Predictions& predictions, const std::vector<PoseAnnotation>& annotations,
                 const std::vector<JointId>& subset, const MetricSpec& spec) {
  if (predictions.size() > annotations.size())
    throw UsageError("prediction for sample " + std::to_string(annotations.size()) + " has no annotation");
  if (predictions.size() < annotations.size())
    throw UsageError("annotation for sample " + std::to_string(predictions.size()) + " has no prediction");
  if (!(spec.threshold > 0)) throw UsageError("PCK threshold must be positive");
  MetricReport r;
  r.metric = spec.name();
  r.sample_count = predictions.size();
  for (auto j : subset) r.joints.push_back({j, 0, 0, std::nullopt});
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].size() != subset.size())
      throw UsageError("sample " + std::to_string(i) + " has " + std::to_string(predictions[i].size()) +
                       " predictions for " + std::to_string(subset.size()) + " joints");
    const double limit = spec.threshold * normalizer(annotations[i], spec, i);
    for (std::size_t k = 0; k < subset.size(); ++k) {
      const auto& gt = annotations[i][subset[k]];
      if (!gt.visible) continue;
      const double d = std::hypot(predictions[i][k].x - gt.x, predictions[i][k].y - gt.y);
      ++r.joints[k].total;
      if (d < limit) ++r.joints[k].correct;
    }
  }
  for (auto& js : r.joints) js.score = percent(js.correct, js.total);

  double sum = 0;
  std::size_t n = 0;
  for (const auto& [name, members] : joint_groups()) {
    GroupScore g;
    g.name = name;
    bool present = false;
    for (const auto& js : r.joints)
      if (std::find(members.begin(), members.end(), js.joint) != members.end()) {
        present = true;
        g.correct += js.correct;
        g.total += js.total;
      }
    if (!present) continue;
    g.score = percent(g.correct, g.total);
    g.in_average = g.score && name != "Pelvis" && name != "Thorax";
    if (g.in_average) {
      sum += *g.score;
      ++n;
    }
    r.groups.push_back(g);
  }
  if (n > 0) r.average = sum / static_cast<double>(n);
  return r;
}

MetricReport pckh(const Predictions& predictions, const std::vector<PoseAnnotation>& annotations,
                  const std::vector<JointId>& subset, double threshold) {
  MetricSpec spec;
  spec.threshold = threshold;
  return pck(predictions, annotations, subset, spec);
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  auto joints = nlohmann::json::array();
  for (const auto& s : r.joints)
    joints.push_back({{"joint", joint_name(s.joint)}, {"correct", s.correct}, {"total", s.total}, {"score", opt(s.score)}});
  auto groups = nlohmann::json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"name", g.name}, {"correct", g.correct}, {"total", g.total}, {"score", opt(g.score)},
                      {"in_average", g.in_average}});
  j = {{"metric", r.metric}, {"joints", joints}, {"groups", groups}, {"average", opt(r.average)},
       {"sample_count", r.sample_count}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  r = {};
  r.metric = j.at("metric").get<std::string>();
  for (const auto& s : j.at("joints"))
    r.joints.push_back({joint_from_name(s.at("joint").get<std::string>()), s.at("correct").get<std::size_t>(),
                        s.at("total").get<std::size_t>(), opt(s.at("score"))});
  for (const auto& g : j.at("groups"))
    r.groups.push_back({g.at("name").get<std::string>(), g.at("correct").get<std::size_t>(),
                        g.at("total").get<std::size_t>(), opt(g.at("score")), g.at("in_average").get<bool>()});
  r.average = opt(j.at("average"));
  r.sample_count = j.at("sample_count").get<std::size_t>();
}

Predictions predict(HourglassNet& net, const Dataset& dataset, std::size_t batch_size) {
  const auto& arch = net.arch();
  if (dataset.resolution != arch.input_resolution)
    throw UsageError("dataset resolution " + std::to_string(dataset.resolution) +
                     " does not match network input " + std::to_string(arch.input_resolution));
  const auto previous = net.mode();
  net.set_mode(NetMode::eval);
  NoGradGuard no_grad;
  const std::size_t r = dataset.resolution, hm = arch.heatmap_resolution;
  const std::size_t plane = 3 * r * r;
  Predictions out;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, dataset.size() - start);
    std::vector<float> data(b * plane);
    for (std::size_t i = 0; i < b; ++i)
      std::copy(dataset.samples[start + i].image.data.begin(), dataset.samples[start + i].image.data.end(),
                data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    const auto heads = net.forward(Tensor::from_data({b, 3, r, r}, std::move(data)));
    const auto& last = heads.back();
    const std::size_t joints = last.extent(1);
    const auto values = last.data();
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<DecodedJoint> row;
      for (std::size_t k = 0; k < joints; ++k)
        row.push_back(decode_map(values.subspan((i * joints + k) * hm * hm, hm * hm), hm, r));
      out.push_back(std::move(row));
    }
  }
  net.set_mode(previous);
  return out;
}

MetricReport evaluate_model(HourglassNet& net, const Dataset& dataset,
                            const std::vector<JointId>& subset, MetricSpec spec) {
  if (net.head_channels().back() != subset.size())
    throw UsageError("network predicts " + std::to_string(net.head_channels().back()) + " joints but the subset has " +
                     std::to_string(subset.size()));
  spec.image_resolution = dataset.resolution;
  spec.heatmap_resolution = net.arch().heatmap_resolution;
  const auto preds = predict(net, dataset);
  std::vector<PoseAnnotation> poses;
  for (const auto& s : dataset.samples) poses.push_back(s.pose);
  return pck(preds, poses, subset, spec);
}

namespace {

std::vector<std::string> table_columns(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  if (rows.empty()) throw UsageError("no reports to tabulate");
  auto names = [](const MetricReport& r) {
    std::vector<std::string> v;
    for (const auto& g : r.groups)
      if (g.name != "Pelvis" && g.name != "Thorax") v.push_back(g.name);
    return v;
  };
  const auto cols = names(rows.front().second);
  for (const auto& [label, rep] : rows)
    if (names(rep) != cols) throw InconsistentError("report '" + label + "' has different joint groups");
  return cols;
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v);
  return buf;
}

std::vector<std::vector<std::string>> table_cells(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  const auto cols = table_columns(rows);
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> header{"Configuration"};
  header.insert(header.end(), cols.begin(), cols.end());
  header.push_back("Average");
  out.push_back(header);
  for (const auto& [label, rep] : rows) {
    std::vector<std::string> line{label};
    for (const auto& c : cols) line.push_back(cell(rep.group(c)->score));
    line.push_back(cell(rep.average));
    out.push_back(line);
  }
  return out;
}

}  // namespace

std::string render_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  const auto cells = table_cells(rows);
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      if (c) os << " | ";
      os << line[c];
      if (c + 1 < line.size()) os << std::string(width[c] - line[c].size(), ' ');
    }
    os << '\n';
  }
  return os.str();
}

std::string render_table_csv(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  for (const auto& line : table_cells(rows)) {
    for (std::size_t c = 0; c < line.size(); ++c) os << (c ? "," : "") << line[c];
    os << '\n';
  }
  return os.str();
}

std::string emit_curves(const std::vector<std::pair<std::string, RunHistory>>& histories) {
  std::ostringstream os;
  os << "config,epoch,accuracy,lr\n";
  for (const auto& [config, history] : histories) {
    if (config.find_first_of(",\n\"") != std::string::npos)
      throw UsageError("curve label '" + config + "' may not contain commas, quotes or newlines");
    for (const auto& r : history)
      os << config << ',' << r.epoch << ',' << format_double(r.val_accuracy) << ','
         << format_double(r.learning_rate) << '\n';
  }
  return os.str();
}

std::vector<std::pair<std::string, RunHistory>> parse_curves(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "config,epoch,accuracy,lr")
    throw InconsistentError("curve records must start with the header config,epoch,accuracy,lr");
  std::vector<std::pair<std::string, RunHistory>> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, ',')) f.push_back(part);
    if (f.size() != 4) throw InconsistentError("curve line " + std::to_string(lineno) + " needs 4 fields");
    EpochRecord r;
    auto num = [&](const std::string& s, auto& v) {
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw InconsistentError("curve line " + std::to_string(lineno) + ": bad number '" + s + "'");
    };
    num(f[1], r.epoch);
    num(f[2], r.val_accuracy);
    num(f[3], r.learning_rate);
    if (out.empty() || out.back().first != f[0]) out.push_back({f[0], {}});
    out.back().second.push_back(r);
  }
  return out;
}

}  // namespace kpt
