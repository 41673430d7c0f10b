#include "kpt/transfer.hpp"

#include <cstring>

#include "kpt/error.hpp"
#include "kpt/random.hpp"

namespace kpt {

std::string to_string(TransferMode m) {
  switch (m) {
    case TransferMode::transfer_learning: return "transfer_learning";
    case TransferMode::frozen_weights: return "frozen_weights";
    case TransferMode::random_init: return "random_init";
  }
  return "?";
}

TransferMode transfer_mode_from_string(const std::string& s) {
  for (auto m : all_transfer_modes())
    if (to_string(m) == s) return m;
  throw UsageError("unknown mode '" + s + "' (expected transfer_learning, frozen_weights or random_init)");
}

std::string display_name(TransferMode m) {
  switch (m) {
    case TransferMode::transfer_learning: return "Transfer learning";
    case TransferMode::frozen_weights: return "Frozen weights";
    case TransferMode::random_init: return "Random initialization";
  }
  return "?";
}

const std::vector<TransferMode>& all_transfer_modes() {
  static const std::vector<TransferMode> modes{TransferMode::transfer_learning, TransferMode::frozen_weights,
                                               TransferMode::random_init};
  return modes;
}

bool needs_stage1(TransferMode m) { return m != TransferMode::random_init; }

HourglassArch stage1_arch(const HourglassArch& arch4, std::size_t s1_size) {
  HourglassArch a = arch4;
  a.num_stacks = 2;
  a.num_output_channels = s1_size;
  return a;
}

std::uint64_t weights_fingerprint(const std::vector<NamedTensor<float>>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (const auto& t : tensors) {
    mix(t.name.data(), t.name.size());
    for (auto e : t.tensor.shape()) mix(&e, sizeof e);
    mix(t.tensor.data().data(), t.tensor.numel() * sizeof(float));
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

namespace {

bool in_first_two_units(const std::string& name) {
  return name.rfind("stem.", 0) == 0 || name.rfind("unit0.", 0) == 0 || name.rfind("unit1.", 0) == 0;
}

void check_stage1(const Checkpoint& ckpt, const HourglassArch& arch4, std::size_t s1) {
  std::vector<std::string> bad;
  auto cmp = [&](const char* field, std::size_t have, std::size_t want) {
    if (have != want)
      bad.push_back(std::string(field) + ": checkpoint " + std::to_string(have) + ", expected " + std::to_string(want));
  };
  cmp("num_stacks", ckpt.arch.num_stacks, 2);
  cmp("depth", ckpt.arch.depth, arch4.depth);
  cmp("base_channels", ckpt.arch.base_channels, arch4.base_channels);
  cmp("input_resolution", ckpt.arch.input_resolution, arch4.input_resolution);
  cmp("heatmap_resolution", ckpt.arch.heatmap_resolution, arch4.heatmap_resolution);
  for (std::size_t u = 0; u < ckpt.head_channels.size(); ++u)
    cmp(("unit" + std::to_string(u) + " head_channels").c_str(), ckpt.head_channels[u], s1);
  if (bad.empty()) return;
  std::string msg = "stage-1 checkpoint does not match the experiment architecture:";
  for (const auto& b : bad) msg += " " + b + ";";
  msg.pop_back();
  throw UsageError(msg);
}

}  // namespace

AssembledExperiment assemble(TransferMode mode, const JointSubsetSplit& split, const Checkpoint* stage1,
                             const HourglassArch& arch4, std::uint64_t seed, bool rehead) {
  split.validate();
  arch4.validate();
  if (arch4.num_stacks < 3) throw UsageError("a transfer experiment needs at least three hourglass units");
  const std::size_t s1 = split.s1.size(), s2 = split.s2.size(), n = arch4.num_stacks;
  if (arch4.num_output_channels != s2)
    throw UsageError("architecture predicts " + std::to_string(arch4.num_output_channels) +
                     " joints but S2 has " + std::to_string(s2));
  if (rehead && mode != TransferMode::transfer_learning)
    throw UsageError("re-heading applies to transfer_learning only");
  if (needs_stage1(mode) && !stage1) throw UsageError(to_string(mode) + " needs a stage-1 checkpoint");

  std::vector<std::size_t> heads(n, s2);
  if (needs_stage1(mode)) heads[0] = heads[1] = s1;

  AssembledExperiment e{mode, split, HourglassNet::build(arch4, seed, heads), {}, {}, {}};
  if (needs_stage1(mode)) {
    check_stage1(*stage1, arch4, s1);
    for (const auto& t : stage1->tensors)
      if (!in_first_two_units(t.name)) throw InconsistentError("unexpected stage-1 tensor '" + t.name + "'");
    copy_values(e.net, stage1->tensors);
    e.provenance = hex64(weights_fingerprint(stage1->tensors));
  }
  if (rehead) {
    e.net.replace_head(0, s2, derive_seed({seed, 0x4EAD, 0}));
    e.net.replace_head(1, s2, derive_seed({seed, 0x4EAD, 1}));
  }

  e.plan.units.assign(n, {Domain::s2, true});
  if (mode == TransferMode::transfer_learning && !rehead) e.plan.units[0].target = e.plan.units[1].target = Domain::s1;
  if (mode == TransferMode::frozen_weights) {
    e.plan.units[0] = e.plan.units[1] = {Domain::none, false};
    for (const auto& p : e.net.parameters())
      if (in_first_two_units(p.name)) e.freeze_mask.insert(p.name);
  }
  e.net.set_frozen(e.freeze_mask);
  e.plan.validate(n);
  return e;
}

ParityReport parity_check(const std::vector<const AssembledExperiment*>& experiments) {
  ParityReport r;
  if (experiments.empty()) return r;
  const auto& ref = *experiments.front();
  for (std::size_t i = 0; i < experiments.size(); ++i) {
    const auto& e = *experiments[i];
    const auto c = static_cast<long long>(ref.net.arch().base_channels);
    const auto& h = e.net.head_channels();
    const auto& h0 = ref.net.head_channels();
    long long delta = 0;
    for (std::size_t u = 0; u < std::min(h.size(), h0.size()); ++u) {
      const long long dh = static_cast<long long>(h[u]) - static_cast<long long>(h0[u]);
      delta += dh * (c + 1);                 // head: c x h weights + h biases
      if (u + 1 < h.size()) delta += dh * c;  // heatmap remap: h x c weights
    }
    r.counts.push_back(e.net.parameter_count());
    r.expected_delta.push_back(delta);
    const long long actual = static_cast<long long>(r.counts.back()) - static_cast<long long>(r.counts.front());
    if (actual != delta) {
      r.ok = false;
      r.message += "experiment " + std::to_string(i) + " (" + to_string(e.mode) + "): parameter count differs by " +
                   std::to_string(actual) + " from experiment 0, head arithmetic allows " + std::to_string(delta) +
                   "; ";
    }
  }
  return r;
}

TrainingResult train_stage1(const JointSubsetSplit& split, const HourglassArch& arch2, const TrainingConfig& config,
                            std::uint64_t seed, const Dataset& train, const Dataset& val,
                            const std::filesystem::path& checkpoint, const nlohmann::json& descriptor,
                            const TrainingCallbacks& callbacks) {
  split.validate();
  if (arch2.num_output_channels != split.s1.size())
    throw UsageError("stage-1 architecture predicts " + std::to_string(arch2.num_output_channels) +
                     " joints but S1 has " + std::to_string(split.s1.size()));
  if (arch2.num_stacks != 2) throw UsageError("stage-1 network must have two hourglass units");
  auto net = HourglassNet::build(arch2, seed);
  SupervisionPlan plan{std::vector<UnitSupervision>(2, {Domain::s1, true})};
  auto result = run_training(net, plan, split, train, val, config, callbacks);
  if (!checkpoint.empty()) save_checkpoint(result.best, checkpoint, descriptor);
  return result;
}

JointSubsetSplit ExperimentDescriptor::resolve_split() const {
  return split_file.empty() ? builtin_split(split_tag) : load_split(split_file);
}

void ExperimentDescriptor::validate() const {
  arch.validate();
  training.validate();
  if (stage1) stage1->validate();
  if (needs_stage1(mode) && stage1_checkpoint.empty() && !stage1)
    throw UsageError(to_string(mode) + " requires stage1_checkpoint or a stage1 training section");
  if (rehead && mode != TransferMode::transfer_learning)
    throw UsageError("rehead applies to transfer_learning only");
  if (split_file.empty()) builtin_split(split_tag);
}

nlohmann::json ExperimentDescriptor::stage1_key() const {
  const auto split = resolve_split();
  return {{"split", split},
          {"arch", stage1_arch(arch, split.s1.size())},
          {"training", stage1.value_or(training)},
          {"seed", seed}};
}

void to_json(nlohmann::json& j, const ExperimentDescriptor& d) {
  j = {{"mode", to_string(d.mode)}, {"arch", d.arch}, {"training", d.training}, {"seed", d.seed}};
  if (d.split_file.empty()) j["split"] = d.split_tag;
  else j["split_file"] = d.split_file;
  if (!d.stage1_checkpoint.empty()) j["stage1_checkpoint"] = d.stage1_checkpoint;
  if (d.stage1) j["stage1"] = *d.stage1;
  if (d.rehead) j["rehead"] = true;
}

void from_json(const nlohmann::json& j, ExperimentDescriptor& d) {
  if (!j.is_object()) throw UsageError("experiment descriptor must be an object");
  static const std::set<std::string> known{"mode", "split", "split_file", "stage1_checkpoint", "stage1",
                                           "arch", "training", "seed", "rehead"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw UsageError("experiment descriptor: unknown key '" + k + "'");
  d = ExperimentDescriptor{};
  try {
    if (!j.contains("mode")) throw UsageError("experiment descriptor: missing 'mode'");
    d.mode = transfer_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("split")) d.split_tag = j.at("split").get<std::string>();
    if (j.contains("split_file")) d.split_file = j.at("split_file").get<std::string>();
    if (j.contains("stage1_checkpoint")) d.stage1_checkpoint = j.at("stage1_checkpoint").get<std::string>();
    if (j.contains("stage1")) d.stage1 = j.at("stage1").get<TrainingConfig>();
    if (j.contains("arch")) {
      nlohmann::json a = d.arch;
      if (!j.at("arch").contains("heatmap_resolution")) a.erase("heatmap_resolution");
      a.update(j.at("arch"));
      d.arch = a.get<HourglassArch>();
    }
    if (j.contains("training")) d.training = j.at("training").get<TrainingConfig>();
    if (j.contains("seed")) d.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("rehead")) d.rehead = j.at("rehead").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("experiment descriptor: ") + e.what());
  }
  d.validate();
}

TrainingResult run_experiment(AssembledExperiment& experiment, const Dataset& train, const Dataset& val,
                              const TrainingConfig& config, const TrainingCallbacks& callbacks) {
  if (experiment.net.frozen() != experiment.freeze_mask)
    throw InconsistentError("network frozen set differs from the experiment's freeze mask");
  return run_training(experiment.net, experiment.plan, experiment.split, train, val, config, callbacks);
}

}  // namespace kpt
