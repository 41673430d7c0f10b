#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpt/checkpoint.hpp"
#include "kpt/dataset.hpp"
#include "kpt/hourglass.hpp"
#include "kpt/keypoints.hpp"
#include "kpt/training.hpp"

namespace kpt {

enum class TransferMode { transfer_learning, frozen_weights, random_init };

std::string to_string(TransferMode m);
TransferMode transfer_mode_from_string(const std::string& s);
/// "Transfer learning", "Frozen weights", "Random initialization".
std::string display_name(TransferMode m);
const std::vector<TransferMode>& all_transfer_modes();
bool needs_stage1(TransferMode m);

/// Two-stack counterpart of a four-stack architecture, predicting |S1| joints.
HourglassArch stage1_arch(const HourglassArch& arch4, std::size_t s1_size);

struct AssembledExperiment {
  TransferMode mode{};
  JointSubsetSplit split;
  HourglassNet net;
  std::set<std::string> freeze_mask;
  SupervisionPlan plan;
  std::string provenance;  // stage-1 weights fingerprint, empty for random_init
};

/// Order-sensitive hash over names, shapes and values.
std::uint64_t weights_fingerprint(const std::vector<NamedTensor<float>>& tensors);
std::string hex64(std::uint64_t v);

/// Builds the four-stack network of one configuration. Transfer and frozen
/// modes copy the stem and the first two units (with their batchnorm
/// statistics) from the stage-1 checkpoint; frozen mode freezes every
/// parameter under stem., unit0. and unit1. `rehead` gives units 0 and 1
/// fresh |S2| heads in transfer mode and supervises them on S2.
AssembledExperiment assemble(TransferMode mode, const JointSubsetSplit& split, const Checkpoint* stage1,
                             const HourglassArch& arch4, std::uint64_t seed, bool rehead = false);

struct ParityReport {
  bool ok = true;
  std::vector<std::size_t> counts;
  std::vector<long long> expected_delta;  // relative to the first experiment
  std::string message;
};

/// Counts must differ from the first experiment's by exactly the head and
/// heatmap-remap arithmetic implied by their head widths.
ParityReport parity_check(const std::vector<const AssembledExperiment*>& experiments);

/// Two-stack network trained on S1 targets; the best network is saved to
/// `checkpoint` with `descriptor` embedded.
TrainingResult train_stage1(const JointSubsetSplit& split, const HourglassArch& arch2, const TrainingConfig& config,
                            std::uint64_t seed, const Dataset& train, const Dataset& val,
                            const std::filesystem::path& checkpoint = {}, const nlohmann::json& descriptor = nullptr,
                            const TrainingCallbacks& callbacks = {});

struct ExperimentDescriptor {
  TransferMode mode = TransferMode::random_init;
  std::string split_tag = "d";  // builtin split; ignored when split_file is set
  std::string split_file;
  std::string stage1_checkpoint;             // empty: train stage 1 from `stage1`
  std::optional<TrainingConfig> stage1;
  HourglassArch arch{.num_stacks = 4, .depth = 2, .base_channels = 8, .input_resolution = 32,
                     .heatmap_resolution = 8, .num_output_channels = 8};
  TrainingConfig training;
  std::uint64_t seed = 1;  // network initialization
  bool rehead = false;

  JointSubsetSplit resolve_split() const;
  /// Throws UsageError when a stage-1 mode has neither a checkpoint nor a stage-1 section.
  void validate() const;
  /// Identity of the stage-1 run this descriptor would train.
  nlohmann::json stage1_key() const;
};

void to_json(nlohmann::json& j, const ExperimentDescriptor& d);
void from_json(const nlohmann::json& j, ExperimentDescriptor& d);

/// Supervision plan and validation of the assembled network via run_training.
TrainingResult run_experiment(AssembledExperiment& experiment, const Dataset& train, const Dataset& val,
                              const TrainingConfig& config, const TrainingCallbacks& callbacks = {});

}  // namespace kpt
