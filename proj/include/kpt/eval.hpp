#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kpt/dataset.hpp"
#include "kpt/history.hpp"
#include "kpt/hourglass.hpp"
#include "kpt/keypoints.hpp"

namespace kpt {

enum class Normalization { head, bbox, heatmap_tenth };

std::string to_string(Normalization n);
Normalization normalization_from_string(const std::string& s);

struct MetricSpec {
  double threshold = 0.5;
  Normalization normalization = Normalization::head;
  std::size_t image_resolution = 0;    // needed by heatmap_tenth
  std::size_t heatmap_resolution = 0;  // needed by heatmap_tenth

  /// "PCKh@0.5", "PCK@0.2(bbox)", ...
  std::string name() const;
};

struct JointScore {
  JointId joint{};
  std::size_t correct = 0;
  std::size_t total = 0;  // visible ground-truth instances
  std::optional<double> score;  // percent; empty when total == 0
};

struct GroupScore {
  std::string name;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> score;
  bool in_average = false;  // false for pelvis, thorax and empty groups
};

struct MetricReport {
  std::string metric;
  std::vector<JointScore> joints;
  std::vector<GroupScore> groups;
  std::optional<double> average;  // mean of in_average group scores
  std::size_t sample_count = 0;

  const GroupScore* group(const std::string& name) const;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

/// Joint groups in report column order: Head (head_top, upper_neck),
/// Shoulder, Elbow, Wrist, Hip, Knee, Ankle, Pelvis, Thorax.
const std::vector<std::pair<std::string, std::vector<JointId>>>& joint_groups();

/// Predictions[sample][k] belongs to subset[k].
using Predictions = std::vector<std::vector<DecodedJoint>>;

/// A joint is correct iff its distance to the ground truth is strictly less
/// than threshold x the sample's normalizer. Invisible ground-truth joints
/// count in neither numerator nor denominator.
MetricReport pck(const Predictions& predictions, const std::vector<PoseAnnotation>& annotations,
                 const std::vector<JointId>& subset, const MetricSpec& spec);
MetricReport pckh(const Predictions& predictions, const std::vector<PoseAnnotation>& annotations,
                  const std::vector<JointId>& subset, double threshold = 0.5);

/// Eval-mode forward of every sample, final unit decoded to image pixels.
Predictions predict(HourglassNet& net, const Dataset& dataset, std::size_t batch_size = 16);

MetricReport evaluate_model(HourglassNet& net, const Dataset& dataset,
                            const std::vector<JointId>& subset, MetricSpec spec);

/// Rows in the given order; columns are the averaged groups plus Average,
/// one decimal place. Throws InconsistentError when reports disagree on groups.
std::string render_table(const std::vector<std::pair<std::string, MetricReport>>& rows);
std::string render_table_csv(const std::vector<std::pair<std::string, MetricReport>>& rows);

/// "config,epoch,accuracy,lr" records with a header row.
std::string emit_curves(const std::vector<std::pair<std::string, RunHistory>>& histories);
std::vector<std::pair<std::string, RunHistory>> parse_curves(const std::string& csv);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace kpt
