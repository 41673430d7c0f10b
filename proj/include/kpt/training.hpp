#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpt/dataset.hpp"
#include "kpt/history.hpp"
#include "kpt/hourglass.hpp"
#include "kpt/keypoints.hpp"
#include "kpt/random.hpp"

namespace kpt {

struct AugmentConfig {
  bool enabled = true;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double rot_max_deg = 30.0;
  bool operator==(const AugmentConfig&) const = default;
};

struct TrainingConfig {
  double learning_rate = 2.5e-4;
  double lr_decay_factor = 5.0;
  std::size_t plateau_patience_epochs = 3;
  std::size_t early_stop_patience_epochs = 10;
  std::size_t iterations_per_epoch = 50;
  std::size_t batch_size = 4;
  double rmsprop_alpha = 0.99;
  double rmsprop_eps = 1e-8;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  std::size_t max_epochs = 30;
  double sigma = 1.0;          // target gaussian, heatmap pixels
  bool log_wall_time = false;  // wall seconds make histories nondeterministic

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

/// Unknown keys are rejected; missing keys keep their defaults.
void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

enum class Domain { none, s1, s2 };
std::string to_string(Domain d);

struct UnitSupervision {
  Domain target = Domain::none;
  bool trainable = true;
  bool operator==(const UnitSupervision&) const = default;
};

/// One entry per hourglass unit.
struct SupervisionPlan {
  std::vector<UnitSupervision> units;
  void validate(std::size_t num_units) const;
  bool operator==(const SupervisionPlan&) const = default;
};

const std::vector<JointId>& domain_joints(const JointSubsetSplit& split, Domain d);

/// Sum over supervised units of mse(heads[u], targets[u]); targets of
/// unsupervised units are ignored and may be undefined.
Tensor supervised_loss(const std::vector<Tensor>& heads, const std::vector<Tensor>& targets,
                       const SupervisionPlan& plan, std::vector<double>* unit_losses = nullptr);

/// Squared-gradient averages keyed by parameter name.
struct RmsPropState {
  std::map<std::string, std::vector<float>> square_avg;
};

/// v <- alpha v + (1 - alpha) g^2;  p <- p - lr g / (sqrt(v) + eps).
/// Masked parameters and parameters without a gradient are skipped. All
/// gradients are checked before anything is written; a non-finite one
/// throws NumericError naming the parameter.
void rmsprop_step(const std::vector<NamedTensor<float>>& params, RmsPropState& state, double lr,
                  double alpha, double eps, const std::set<std::string>& mask = {});

/// Divides the rate once `patience` consecutive epochs fail to beat the
/// best accuracy (strict >), then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(std::size_t patience, double factor);
  /// Records one epoch's accuracy; returns the rate for the next epoch.
  double step(double accuracy, double lr);
  std::size_t counter() const { return counter_; }

 private:
  std::size_t patience_;
  double factor_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t counter_ = 0;
};

/// Rates in effect after each epoch of `accuracies`, starting from `lr`.
std::vector<double> plateau_schedule(const std::vector<double>& accuracies, double lr,
                                     std::size_t patience, double factor);

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience);
  /// True once the last `patience` epochs all failed to beat the best.
  bool step(double accuracy);
  std::size_t counter() const { return counter_; }

 private:
  std::size_t patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t counter_ = 0;
};

/// 1-based epoch at which stopping fires, or 0 when it never does.
std::size_t early_stop_epoch(const std::vector<double>& accuracies, std::size_t patience);

struct AugmentDraw {
  double scale = 1.0;
  double rotation_deg = 0.0;
};

AugmentDraw draw_augmentation(Rng& rng, const AugmentConfig& cfg);
/// Bilinear warp of the image plus the same affine on the annotation.
Sample augment(const Sample& sample, const AugmentDraw& draw);
Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg);

/// Ground truth as the network can express it: every visible joint moved to
/// the decoded peak of its rendered target.
std::vector<PoseAnnotation> quantized_annotations(const Dataset& dataset,
                                                  const std::vector<JointId>& subset,
                                                  std::size_t heatmap_resolution, double sigma);

/// Mean PCK@0.5 (heatmap/10 normalizer) of the final unit against quantized
/// ground truth.
double validation_accuracy(HourglassNet& net, const Dataset& val, const std::vector<JointId>& subset,
                           double sigma);

struct StepInfo {
  std::size_t epoch = 0;      // 1-based
  std::size_t iteration = 0;  // 0-based within the epoch
  const std::vector<std::size_t>* indices = nullptr;
  const Tensor* input = nullptr;
  const std::vector<Tensor>* heads = nullptr;
  const std::vector<Tensor>* targets = nullptr;
  double loss = 0.0;
  const std::vector<double>* unit_losses = nullptr;
};

struct TrainingCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Runs after backward and before the optimizer step.
  std::function<void(const HourglassNet&, const StepInfo&)> after_backward;
};

struct TrainingResult {
  HourglassNet best;  // network of the best validation epoch
  RunHistory history;
  double initial_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
};

/// Batches are drawn from a per-epoch permutation (wrapping when an epoch
/// needs more samples than the set holds) and augmented with a stream keyed
/// by (seed, epoch, iteration, slot). The parameters named in net.frozen()
/// never change. Validation tracks the final unit's domain.
TrainingResult run_training(HourglassNet& net, const SupervisionPlan& plan, const JointSubsetSplit& split,
                            const Dataset& train, const Dataset& val, const TrainingConfig& config,
                            const TrainingCallbacks& callbacks = {});

}  // namespace kpt
