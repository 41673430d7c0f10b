// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Exits 0 once every criterion has been evaluated; the verdicts are the
// printed lines.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "kpt/checkpoint.hpp"
#include "kpt/cli.hpp"
#include "kpt/error.hpp"
#include "kpt/eval.hpp"
#include "kpt/grad_check.hpp"
#include "kpt/ops.hpp"
#include "kpt/transfer.hpp"
#include "test_support.hpp"

using namespace kpt;
using kpt::testing::as_double;
using kpt::testing::random_tensor;
using kpt::testing::rel_diff;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool ok = true;
  std::ostringstream detail;
  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << "  failed: " << what << "\n";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto t0 = Clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.ok = false;
    v.detail << "  exception: " << e.what() << "\n";
  }
  const double s = std::chrono::duration<double>(Clock::now() - t0).count();
  std::cout << (v.ok ? "PASS " : "FAIL ") << name << " (" << std::fixed << std::setprecision(1) << s << " s)\n"
            << v.detail.str() << std::flush;
  std::cout.unsetf(std::ios::fixed);
  failures += !v.ok;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("kpt_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------- gradients

void gradient_fidelity(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(2024);
  GradCheckOptions opt;  // epsilon 1e-3, tolerance 1e-4
  auto report = [&](const std::string& what, const GradCheckResult& r) {
    v.detail << "  " << what << ": max rel error " << r.max_rel_error << " over " << r.checked << " elements ("
             << r.skipped << " at kinks)\n";
    v.require(r.max_rel_error < 1e-4, what + " error below 1e-4");
    v.require(r.checked > 0, what + " checked something");
  };
  auto kinks = opt;
  kinks.skip_branch_changes = true;

  {
    auto x = random_tensor<double>(rng, {2, 2, 7, 7});
    auto k = random_tensor<double>(rng, {3, 2, 3, 3});
    auto b = random_tensor<double>(rng, {3});
    auto t = random_tensor<double>(rng, {2, 3, 4, 4});
    report("conv2d 3x3 s2 p1", grad_check([&] { return mse_loss(conv2d(x, k, b, 2, 1), t); }, {x, k, b}, opt));
    auto k1 = random_tensor<double>(rng, {4, 2, 1, 1});
    auto b1 = random_tensor<double>(rng, {4});
    auto t1 = random_tensor<double>(rng, {2, 4, 7, 7});
    report("conv2d 1x1", grad_check([&] { return mse_loss(conv2d(x, k1, b1, 1, 0), t1); }, {x, k1, b1}, opt));
  }
  {
    auto x = random_tensor<double>(rng, {2, 3, 6, 6});
    auto t = random_tensor<double>(rng, {2, 3, 3, 3});
    report("maxpool2", grad_check([&] { return mse_loss(maxpool2(x).output, t); }, {x}, kinks));
    auto t2 = random_tensor<double>(rng, {2, 3, 12, 12});
    report("upsample_nearest2", grad_check([&] { return mse_loss(upsample_nearest2(x), t2); }, {x}, opt));
    auto t3 = random_tensor<double>(rng, {2, 3, 6, 6});
    report("relu", grad_check([&] { return mse_loss(relu(x), t3); }, {x}, kinks));
    auto y = random_tensor<double>(rng, {2, 3, 6, 6});
    report("add", grad_check([&] { return mse_loss(add(x, y), t3); }, {x, y}, opt));
    report("scale", grad_check([&] { return mse_loss(scale(x, -1.7), t3); }, {x}, opt));
    report("sum", grad_check([&] { return scale(sum(x), 0.3); }, {x}, opt));
    report("mse_loss", grad_check([&] { return mse_loss(x, t3); }, {x, t3}, opt));
  }
  {
    auto x = random_tensor<double>(rng, {4, 3, 4, 4}, -2, 3);
    auto gamma = random_tensor<double>(rng, {3}, 0.5, 1.5);
    auto beta = random_tensor<double>(rng, {3});
    auto t = random_tensor<double>(rng, {4, 3, 4, 4});
    report("batchnorm2d train", grad_check(
                                    [&] {
                                      auto stats = BatchNormStats<double>::fresh(3);
                                      return mse_loss(batchnorm2d(x, gamma, beta, stats, 1e-5, 0.1,
                                                                  BatchNormMode::train),
                                                      t);
                                    },
                                    {x, gamma, beta}, opt));
    BatchNormStats<double> stats{random_tensor<double>(rng, {3}), random_tensor<double>(rng, {3}, 0.5, 2)};
    report("batchnorm2d eval", grad_check(
                                   [&] {
                                     return mse_loss(
                                         batchnorm2d(x, gamma, beta, stats, 1e-5, 0.1, BatchNormMode::eval), t);
                                   },
                                   {x, gamma, beta}, opt));
  }
  {
    HourglassArch a{.num_stacks = 1, .depth = 2, .base_channels = 4, .input_resolution = 16,
                    .heatmap_resolution = 4, .num_output_channels = 3};
    auto net = StackedHourglassNet<double>::build(a, 17);
    Rng r2(18);
    auto x = random_tensor<double>(r2, {2, 3, 16, 16}, 0, 1);
    auto t = random_tensor<double>(r2, {2, 3, 4, 4}, 0, 1);
    std::vector<TensorD> inputs;
    for (const auto& p : net.parameters()) inputs.push_back(p.tensor);
    inputs.push_back(x);
    net.set_mode(NetMode::eval);
    Rng r3(99);
    for (auto nt : net.tensors()) {
      if (!nt.is_buffer) continue;
      const bool var = nt.name.find("running_var") != std::string::npos;
      for (auto& e : nt.tensor.mutable_data()) e = var ? r3.uniform(0.5, 2.0) : r3.uniform(-0.5, 0.5);
    }
    const auto r = grad_check([&] { return mse_loss(net.forward(x)[0], t); }, inputs, kinks);
    report("one-unit hourglass", r);
    v.require(r.checked > 20 * r.skipped, "kink-straddling elements stay under 5%");
  }
  const double s = seconds_since(t0);
  v.require(s < 120, "suite under 2 min");
}

// ------------------------------------------------------------------ kernels

void kernel_oracles(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(4242);
  std::size_t conv_shapes = 0, pool_shapes = 0, up_shapes = 0;
  double worst = 0;
  auto compare = [&](const TensorD& got, const std::vector<double>& ref) {
    if (got.numel() != ref.size()) {
      worst = INFINITY;
      return;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, rel_diff(got.data()[i], ref[i]));
  };
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(4), f = 1 + rng.below(5);
    const std::size_t k = 1 + rng.below(4), s = 1 + rng.below(2), p = rng.below(3);
    std::size_t h = k + rng.below(7);
    while ((h + 2 * p - k) % s) ++h;
    const std::size_t w = h;
    auto x = random_tensor<double>(rng, {n, c, h, w});
    auto kern = random_tensor<double>(rng, {f, c, k, k});
    auto b = random_tensor<double>(rng, {f});
    compare(conv2d(x, kern, b, s, p),
            kpt::testing::conv_oracle(as_double(x), n, c, h, w, as_double(kern), f, k, k, as_double(b), s, p));
    ++conv_shapes;
  }
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(4);
    const std::size_t h = 2 * (1 + rng.below(8)), w = 2 * (1 + rng.below(8));
    auto x = random_tensor<double>(rng, {n, c, h, w});
    compare(maxpool2(x).output, kpt::testing::maxpool_oracle(as_double(x), n * c, h, w));
    ++pool_shapes;
    auto y = random_tensor<double>(rng, {n, c, h / 2 + 1, w / 2});
    compare(upsample_nearest2(y), kpt::testing::upsample_oracle(as_double(y), n * c, h / 2 + 1, w / 2));
    ++up_shapes;
  }
  v.detail << "  " << conv_shapes << " conv2d, " << pool_shapes << " maxpool2, " << up_shapes
           << " upsample_nearest2 shapes; worst relative difference " << worst << "\n";
  v.require(worst <= 1e-6, "elementwise agreement within 1e-6");
  v.require(conv_shapes >= 20 && pool_shapes >= 20 && up_shapes >= 20, "at least 20 shapes each");
  v.require(seconds_since(t0) < 60, "under 1 min");
}

// ------------------------------------------------------------------- splits

std::set<JointId> expand(const std::vector<std::string>& groups) {
  static const std::map<std::string, std::vector<std::string>> names{
      {"Head", {"head_top"}},
      {"Neck", {"upper_neck"}},
      {"Shoulders", {"r_shoulder", "l_shoulder"}},
      {"Elbows", {"r_elbow", "l_elbow"}},
      {"Wrists", {"r_wrist", "l_wrist"}},
      {"Hip", {"r_hip", "l_hip"}},
      {"Knees", {"r_knee", "l_knee"}},
      {"Ankles", {"r_ankle", "l_ankle"}},
      {"Pelvis", {"pelvis"}},
      {"Thorax", {"thorax"}}};
  std::set<JointId> out;
  for (const auto& g : groups)
    for (const auto& n : names.at(g)) out.insert(joint_from_name(n));
  return out;
}

void split_correctness(Verdict& v) {
  const std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> table{
      {"a", {{"Head", "Neck", "Shoulders", "Pelvis", "Thorax", "Hip"}, {"Knees", "Ankles", "Wrists", "Elbows"}}},
      {"b", {{"Head", "Neck", "Shoulders", "Elbows", "Hip"}, {"Knees", "Ankles", "Wrists", "Pelvis", "Thorax"}}},
      {"c", {{"Head", "Neck", "Shoulders", "Elbows", "Knees"}, {"Wrists", "Ankles", "Hip", "Pelvis", "Thorax"}}},
      {"d", {{"Knees", "Ankles", "Wrists", "Elbows"}, {"Head", "Neck", "Elbows", "Knees", "Pelvis", "Thorax"}}}};
  for (const auto& [tag, sets] : table) {
    const auto s = builtin_split(tag);
    const std::set<JointId> s1(s.s1.begin(), s.s1.end()), s2(s.s2.begin(), s.s2.end());
    v.require(s.s1.size() == 8 && s.s2.size() == 8 && s1.size() == 8 && s2.size() == 8,
              "split " + tag + " has 8 distinct joints per subset");
    v.require(s1 == expand(sets.first), "split " + tag + " S1 matches the table");
    v.require(s2 == expand(sets.second), "split " + tag + " S2 matches the table");
    std::set<JointId> both;
    for (auto j : s1)
      if (s2.contains(j)) both.insert(j);
    if (tag != "d") {
      v.require(both.empty(), "split " + tag + " subsets are disjoint");
      std::set<JointId> all(s1);
      all.insert(s2.begin(), s2.end());
      v.require(all.size() == kNumJoints, "split " + tag + " covers all 16 joints");
    } else {
      v.require(both == std::set<JointId>{JointId::r_elbow, JointId::l_elbow, JointId::r_knee, JointId::l_knee},
                "split d intersection is the elbows and knees");
    }
  }
  v.detail << "  splits a-d checked against the subset table\n";
}

// ------------------------------------------------------------------ metrics

void metric_oracles(Verdict& v) {
  Rng rng(31337);
  std::size_t instances = 0, mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<JointId> subset;
    for (auto j : all_joints())
      if (rng.uniform() < 0.6) subset.push_back(j);
    if (subset.empty()) subset.push_back(JointId::pelvis);
    const std::size_t n = 1 + rng.below(10);
    std::vector<PoseAnnotation> gt(n);
    Predictions pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& kp : gt[i].joints) kp = {rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform() < 0.8};
      gt[i].joints[0] = {1, 2, true};
      gt[i].joints[kNumJoints - 1] = {40, 50, true};
      gt[i].head_len = rng.uniform(3, 15);
      for (auto j : subset)
        pred[i].push_back({gt[i][j].x + rng.uniform(-10, 10), gt[i][j].y + rng.uniform(-10, 10), 1});
    }
    const double thr = rng.uniform(0.2, 1.0);
    for (auto norm : {Normalization::head, Normalization::bbox}) {
      const auto r = norm == Normalization::head ? pckh(pred, gt, subset, thr) : pck(pred, gt, subset, {thr, norm});
      // Recount per sample, then per joint.
      std::vector<std::size_t> hit(subset.size()), tot(subset.size());
      for (std::size_t i = 0; i < n; ++i) {
        double scale_px = gt[i].head_len;
        if (norm == Normalization::bbox) {
          std::vector<double> xs, ys;
          for (const auto& q : gt[i].joints)
            if (q.visible) xs.push_back(q.x), ys.push_back(q.y);
          scale_px = xs.empty() ? 0
                                : std::max(*std::max_element(xs.begin(), xs.end()) - *std::min_element(xs.begin(), xs.end()),
                                           *std::max_element(ys.begin(), ys.end()) - *std::min_element(ys.begin(), ys.end()));
        }
        for (std::size_t k = 0; k < subset.size(); ++k) {
          const auto& g = gt[i][subset[k]];
          if (!g.visible) continue;
          ++tot[k];
          hit[k] += std::hypot(pred[i][k].x - g.x, pred[i][k].y - g.y) < thr * scale_px;
        }
      }
      for (std::size_t k = 0; k < subset.size(); ++k)
        mismatches += r.joints[k].correct != hit[k] || r.joints[k].total != tot[k];
      // Group scores and their average, pelvis and thorax left out.
      double sum = 0;
      int used = 0;
      for (const auto& [name, members] : joint_groups()) {
        std::size_t c = 0, tt = 0;
        for (std::size_t k = 0; k < subset.size(); ++k)
          if (std::find(members.begin(), members.end(), subset[k]) != members.end()) c += hit[k], tt += tot[k];
        const auto* g = r.group(name);
        if (tt == 0) continue;
        const double score = 100.0 * static_cast<double>(c) / static_cast<double>(tt);
        mismatches += !g || !g->score || *g->score != score;
        if (name == "Pelvis" || name == "Thorax") {
          mismatches += g && g->in_average;
          continue;
        }
        sum += score;
        ++used;
      }
      if (used) mismatches += !r.average || std::abs(*r.average - sum / used) > 1e-12;
      else mismatches += r.average.has_value();
      ++instances;
    }
  }
  v.detail << "  " << instances << " randomized instances, " << mismatches << " disagreements with the recount\n";
  v.require(mismatches == 0, "metric equals the recount");

  // Exactly at 0.5 head lengths is a miss; just inside is a hit.
  PoseAnnotation p;
  p.head_len = 24;
  p[JointId::r_ankle] = {10, 10, true};
  p[JointId::l_ankle] = {10, 10, true};
  const auto edge = pckh({{{22, 10, 1}, {21.999, 10, 1}}}, {p}, {JointId::r_ankle, JointId::l_ankle});
  v.require(edge.joints[0].correct == 0, "distance == 0.5 head_len is incorrect");
  v.require(edge.joints[1].correct == 1, "distance just below 0.5 head_len is correct");

  // Torso joints perfect, everything else wrong: the average ignores them.
  PoseAnnotation q;
  q.head_len = 10;
  for (std::size_t i = 0; i < kNumJoints; ++i) q.joints[i] = {20.0 + 2.0 * i, 30.0 + i, true};
  std::vector<JointId> all(all_joints().begin(), all_joints().end());
  std::vector<DecodedJoint> row;
  for (auto j : all)
    row.push_back(j == JointId::pelvis || j == JointId::thorax ? DecodedJoint{q[j].x, q[j].y, 1} : DecodedJoint{0, 0, 1});
  for (auto norm : {Normalization::head, Normalization::bbox, Normalization::heatmap_tenth}) {
    const auto r = pck({row}, {q}, all, {0.5, norm, 64, 16});
    v.require(r.average && *r.average == 0.0, "pelvis and thorax excluded from the " + to_string(norm) + " average");
    v.require(!r.group("Pelvis")->in_average && !r.group("Thorax")->in_average, "torso groups flagged out of the average");
  }
}

// ------------------------------------------------------------ desk pipeline

struct Cli {
  int code;
  std::string out, err;
};

Cli kpt_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Desk config: 200 synthetic 32x32 images (50 validation), split d,
// 4 stacks of depth 2, 30 epochs of 50 iterations at batch 4.
constexpr double kDeskLearningRate = 1e-3;

struct ModeRun {
  double seconds = 0;
  double best_accuracy = 0;
  double pckh_average = 0;
  RunHistory history;
};

struct Pipeline {
  std::map<std::string, ModeRun> modes;
  std::map<std::string, std::string> logs;  // relative path -> history.jsonl bytes
  std::string report;
  std::string error;
};

Pipeline desk_pipeline(std::uint64_t seed, const fs::path& root) {
  Pipeline p;
  const auto data = root / "data";
  auto g = kpt_cli({"gen-data", "--seed", std::to_string(seed), "--count", "200", "--resolution", "32", "--out",
                    data.string()});
  if (g.code) {
    p.error = "gen-data exited " + std::to_string(g.code) + ": " + g.err;
    return p;
  }
  for (const char* mode : {"transfer_learning", "frozen_weights", "random_init"}) {
    const nlohmann::json training = {{"learning_rate", kDeskLearningRate},
                                     {"max_epochs", 30},
                                     {"iterations_per_epoch", 50},
                                     {"batch_size", 4},
                                     {"seed", seed}};
    nlohmann::json cfg = {{"run_id", mode},
                          {"dataset", "data"},
                          {"val_count", 50},
                          {"split_seed", seed},
                          {"experiment",
                           {{"mode", mode},
                            {"split", "d"},
                            {"seed", seed},
                            {"arch", {{"num_stacks", 4}, {"depth", 2}, {"base_channels", 8}}},
                            {"training", training},
                            {"stage1", training}}}};
    const auto cfg_path = root / (std::string(mode) + ".json");
    std::ofstream(cfg_path) << cfg.dump(2);
    const auto t0 = Clock::now();
    auto r = kpt_cli({"train", "--config", cfg_path.string(), "--out", (root / "runs").string()});
    if (r.code) {
      p.error = std::string(mode) + " exited " + std::to_string(r.code) + ": " + r.err;
      return p;
    }
    ModeRun m;
    m.seconds = seconds_since(t0);
    const auto rep = nlohmann::json::parse(slurp(root / "runs" / mode / "report.json"));
    m.best_accuracy = rep["validation"]["best_accuracy"].get<double>();
    m.pckh_average = rep["report"]["average"].is_null() ? NAN : rep["report"]["average"].get<double>();
    for (const auto& j : read_results(root / "runs" / mode / "history.jsonl")) m.history.push_back(j.get<EpochRecord>());
    p.modes[mode] = m;
  }
  auto rep = kpt_cli({"report", "--runs", (root / "runs").string()});
  if (rep.code) p.error = "report exited " + std::to_string(rep.code) + ": " + rep.err;
  p.report = rep.out;
  for (const auto& e : fs::recursive_directory_iterator(root / "runs"))
    if (e.is_regular_file() && e.path().filename() == "history.jsonl")
      p.logs[fs::relative(e.path(), root).string()] = slurp(e.path());
  return p;
}

std::map<std::uint64_t, Pipeline>& desk_runs() {
  static std::map<std::uint64_t, Pipeline> runs;
  return runs;
}

const Pipeline& desk(std::uint64_t seed) {
  auto& runs = desk_runs();
  if (!runs.contains(seed)) runs[seed] = desk_pipeline(seed, scratch("desk_seed" + std::to_string(seed)));
  return runs.at(seed);
}

// ------------------------------------------------------------ configurations

std::uint64_t masked_hash(const HourglassNet& net, const std::set<std::string>& mask) {
  std::vector<NamedTensor<float>> sel;
  for (const auto& t : net.tensors())
    if (mask.contains(t.name)) sel.push_back(t);
  return weights_fingerprint(sel);
}

void configuration_semantics(Verdict& v) {
  const HourglassArch arch4{.num_stacks = 4, .depth = 2, .base_channels = 8, .input_resolution = 32,
                            .heatmap_resolution = 8, .num_output_channels = 8};
  const auto split = builtin_split("d");
  auto data = generate_synthetic(1, 200, 32);
  auto [train, val] = split_train_val(data, 50, 1);
  TrainingConfig cfg;
  cfg.learning_rate = kDeskLearningRate;
  cfg.max_epochs = 5;
  cfg.seed = 1;
  const auto dir = scratch("config");
  train_stage1(split, stage1_arch(arch4, split.s1.size()), cfg, 1, train, val, dir / "s1.kpt");
  const auto ckpt = load_checkpoint(dir / "s1.kpt");

  // (i) frozen
  auto fw = assemble(TransferMode::frozen_weights, split, &ckpt, arch4, 1);
  std::set<std::string> masked = fw.freeze_mask;
  for (const auto& t : fw.net.tensors())
    if (t.is_buffer && (t.name.rfind("stem.", 0) == 0 || t.name.rfind("unit0.", 0) == 0 || t.name.rfind("unit1.", 0) == 0))
      masked.insert(t.name);
  const auto before = masked_hash(fw.net, masked);
  std::size_t populated = 0, steps = 0;
  TrainingCallbacks cb;
  cb.after_backward = [&](const HourglassNet& net, const StepInfo&) {
    ++steps;
    for (const auto& t : net.tensors())
      if (fw.freeze_mask.contains(t.name) && t.tensor.has_grad())
        for (float g : t.tensor.grad()) populated += g != 0.0f;
  };
  auto fr = run_experiment(fw, train, val, cfg, cb);
  v.detail << "  frozen: " << fw.freeze_mask.size() << " masked parameters, " << fr.history.size() << " epochs, "
           << steps << " steps, " << populated << " masked gradient entries populated\n";
  v.require(fr.history.size() == 5, "frozen run lasted 5 epochs");
  v.require(populated == 0, "no gradient on masked parameters");
  v.require(masked_hash(fw.net, masked) == before, "masked hash unchanged after training");
  v.require(masked_hash(fr.best, masked) == before, "masked hash unchanged in the best network");

  // (ii) transfer
  auto tl = assemble(TransferMode::transfer_learning, split, &ckpt, arch4, 1);
  bool equal_at_assembly = true;
  for (const auto& t : ckpt.tensors) {
    const auto mine = tl.net.find(t.name);
    equal_at_assembly = equal_at_assembly && std::equal(mine.data().begin(), mine.data().end(), t.tensor.data().begin(),
                                                        t.tensor.data().end());
  }
  v.require(equal_at_assembly, "transplanted tensors equal the checkpoint at assembly");
  run_experiment(tl, train, val, cfg);
  std::size_t changed = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.is_buffer) continue;
    const auto mine = tl.net.find(t.name);
    changed += !std::equal(mine.data().begin(), mine.data().end(), t.tensor.data().begin(), t.tensor.data().end());
  }
  v.detail << "  transfer: " << ckpt.tensors.size() << " transplanted tensors, " << changed
           << " parameters changed by training\n";
  v.require(changed > 0, "at least one transplanted parameter changes");

  // (iii) parity, with an independent closed-form count per mode
  auto ri = assemble(TransferMode::random_init, split, nullptr, arch4, 1);
  auto fresh_tl = assemble(TransferMode::transfer_learning, split, &ckpt, arch4, 1);
  auto fresh_fw = assemble(TransferMode::frozen_weights, split, &ckpt, arch4, 1);
  const auto parity = parity_check({&fresh_tl, &fresh_fw, &ri});
  const std::size_t c = arch4.base_channels, s2 = split.s2.size();
  std::size_t closed = 0;
  for (const auto& p : ri.net.parameters())
    if (p.name.find(".head.") == std::string::npos && p.name.find(".remap_heatmaps.") == std::string::npos)
      closed += p.tensor.numel();
  closed += arch4.num_stacks * (c * s2 + s2) + (arch4.num_stacks - 1) * (s2 * c + c);
  v.detail << "  parameter counts " << parity.counts[0] << " / " << parity.counts[1] << " / " << parity.counts[2]
           << ", closed form " << closed << "\n";
  v.require(parity.ok && parity.counts[0] == parity.counts[1] && parity.counts[1] == parity.counts[2],
            "three modes have equal parameter counts");
  v.require(parity.counts[2] == closed, "count matches the layer arithmetic");
}

// ----------------------------------------------------------------- protocol

void protocol_semantics(Verdict& v) {
  TrainingConfig defaults;
  v.require(defaults.lr_decay_factor == 5.0, "default decay factor is 5");
  v.require(defaults.early_stop_patience_epochs == 10, "default early-stop patience is 10");

  // Plateau: replay synthetic traces against a hand-written rule.
  Rng rng(77);
  std::size_t decays = 0, mismatches = 0;
  for (int trace = 0; trace < 50; ++trace) {
    PlateauScheduler sched(defaults.plateau_patience_epochs, defaults.lr_decay_factor);
    double lr = 2.5e-4, best = -1, expect = lr;
    std::size_t stale = 0;
    for (int e = 0; e < 40; ++e) {
      const double acc = rng.uniform() < 0.3 ? best + rng.uniform(0.01, 2) : std::max(0.0, best - rng.uniform(0, 3));
      if (acc > best) best = acc, stale = 0;
      else if (++stale == defaults.plateau_patience_epochs) expect /= 5.0, stale = 0, ++decays;
      const double next = sched.step(acc, lr);
      if (next != lr) mismatches += next != lr / 5.0;
      lr = next;
      mismatches += lr != expect;
    }
  }
  v.detail << "  plateau: " << decays << " decays over 50 traces, " << mismatches << " mismatches\n";
  v.require(decays > 0 && mismatches == 0, "plateau divides by exactly 5 when the rule says so");

  // Early stop after exactly 10 non-improving epochs, for several histories.
  for (std::size_t rise = 1; rise <= 6; ++rise) {
    EarlyStopper stop(10);
    std::size_t fired = 0;
    for (std::size_t e = 1; e <= 40 && !fired; ++e) {
      const double acc = e <= rise ? static_cast<double>(e) : static_cast<double>(rise) - 0.5 * (e % 2);
      if (stop.step(acc)) fired = e;
    }
    v.require(fired == rise + 10, "early stop fires at epoch " + std::to_string(rise + 10) + " (got " +
                                      std::to_string(fired) + ")");
  }
  EarlyStopper flat(10);
  std::size_t fired = 0;
  for (std::size_t e = 1; e <= 20 && !fired; ++e)
    if (flat.step(50.0)) fired = e;
  v.require(fired == 11, "a constant history stops after its first epoch plus 10");

  // Augmentation ranges.
  AugmentConfig aug;
  Rng draws(5);
  double lo_s = 1e9, hi_s = -1e9, lo_r = 1e9, hi_r = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const auto d = draw_augmentation(draws, aug);
    lo_s = std::min(lo_s, d.scale), hi_s = std::max(hi_s, d.scale);
    lo_r = std::min(lo_r, d.rotation_deg), hi_r = std::max(hi_r, d.rotation_deg);
  }
  v.detail << "  augmentation over 10^4 draws: scale [" << lo_s << ", " << hi_s << "], rotation [" << lo_r << ", "
           << hi_r << "] deg\n";
  v.require(lo_s >= 0.75 && hi_s <= 1.25, "scale within [0.75, 1.25]");
  v.require(lo_r >= -30 && hi_r <= 30, "rotation within [-30, 30] deg");
  v.require(hi_s - lo_s > 0.45 && hi_r - lo_r > 55, "draws span the ranges");
}

// -------------------------------------------------------------- determinism

void determinism(Verdict& v) {
  const auto& a = desk(1);
  v.require(a.error.empty(), "first pipeline ran: " + a.error);
  const auto b = desk_pipeline(1, scratch("desk_repeat"));
  v.require(b.error.empty(), "second pipeline ran: " + b.error);
  v.detail << "  " << a.logs.size() << " results logs compared\n";
  v.require(a.logs.size() == 4, "stage 1 plus three mode logs");
  v.require(a.logs == b.logs, "results logs bit-identical");
  v.require(a.report == b.report, "report output identical");
  for (const auto& [mode, run] : a.modes) {
    v.detail << "  " << mode << ": " << run.seconds << " s" << (mode == "transfer_learning" ? " (includes stage 1)" : "")
             << "\n";
    v.require(run.seconds < 1800, mode + " under 30 min");
  }
}

// -------------------------------------------------------------- directional

std::size_t epochs_to_90(const RunHistory& h) {
  const double target = 0.9 * h.back().val_accuracy;
  for (const auto& r : h)
    if (r.val_accuracy >= target) return r.epoch;
  return h.back().epoch;
}

void directional(Verdict& v) {
  std::size_t frozen_worst = 0, faster = 0;
  std::ostringstream curves;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& p = desk(seed);
    if (!p.error.empty()) {
      v.require(false, "seed " + std::to_string(seed) + " pipeline ran: " + p.error);
      return;
    }
    const auto& tl = p.modes.at("transfer_learning");
    const auto& fw = p.modes.at("frozen_weights");
    const auto& ri = p.modes.at("random_init");
    const bool worst = fw.best_accuracy < tl.best_accuracy && fw.best_accuracy < ri.best_accuracy;
    const auto e_tl = epochs_to_90(tl.history), e_ri = epochs_to_90(ri.history);
    std::size_t ahead = 0, shared = std::min(tl.history.size(), ri.history.size());
    for (std::size_t e = 0; e < shared; ++e) ahead += tl.history[e].val_accuracy > ri.history[e].val_accuracy;
    frozen_worst += worst;
    faster += e_tl <= e_ri;
    v.detail << "  seed " << seed << ": S2 validation PCK transfer " << tl.best_accuracy << ", frozen "
             << fw.best_accuracy << ", random " << ri.best_accuracy << " (PCKh avg " << tl.pckh_average << " / "
             << fw.pckh_average << " / " << ri.pckh_average << "); epochs to 90% of final: transfer " << e_tl
             << ", random " << e_ri << "; transfer ahead of random in " << ahead << "/" << shared << " epochs\n";
    for (const auto& [mode, run] : p.modes) {
      curves << "    seed " << seed << " " << mode << ":";
      for (const auto& r : run.history) curves << " " << r.val_accuracy;
      curves << "\n";
    }
  }
  v.detail << "  (i) frozen worst in " << frozen_worst << "/3 seeds; (ii) transfer no slower in " << faster
           << "/3 seeds\n";
  v.require(frozen_worst == 3, "(i) frozen weights worst in every seed");
  v.require(faster >= 2, "(ii) transfer converges no slower in at least 2 of 3 seeds");
  if (!v.ok) v.detail << "  per-seed validation curves:\n" << curves.str();
}

// ---------------------------------------------------------------- round trip

void round_trip(Verdict& v) {
  const auto dir = scratch("roundtrip");
  auto tree = [](const fs::path& d) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(d))
      if (e.is_regular_file()) files[fs::relative(e.path(), d).string()] = slurp(e.path());
    return files;
  };
  const auto data = generate_synthetic(9, 25, 32);
  save_dataset(data, dir / "d1");
  const auto loaded = load_dataset(dir / "d1");
  save_dataset(loaded, dir / "d2");
  v.require(loaded.samples == data.samples, "dataset values survive");
  v.require(tree(dir / "d1") == tree(dir / "d2"), "dataset bytes identical");

  HourglassArch a{.num_stacks = 4, .depth = 2, .base_channels = 8, .input_resolution = 32,
                  .heatmap_resolution = 8, .num_output_channels = 8};
  auto net = HourglassNet::build(a, 3, {8, 8, 8, 8});
  Rng rng(1);
  net.forward(random_tensor<float>(rng, {2, 3, 32, 32}, 0, 1));
  save_checkpoint(net, dir / "a.kpt", {{"note", "acceptance"}});
  const auto ck = load_checkpoint(dir / "a.kpt");
  save_checkpoint(instantiate(ck), dir / "b.kpt", ck.descriptor);
  const auto bytes = slurp(dir / "a.kpt");
  v.require(bytes == slurp(dir / "b.kpt"), "checkpoint bytes identical");

  std::size_t rejected = 0, cuts = 0;
  for (std::size_t cut = 0; cut < bytes.size(); cut += 1 + bytes.size() / 40) {
    ++cuts;
    std::ofstream(dir / "t.kpt", std::ios::binary) << bytes.substr(0, cut);
    try {
      load_checkpoint(dir / "t.kpt");
    } catch (const IoError&) {
      ++rejected;
    } catch (const Error&) {
      ++rejected;
    }
  }
  std::ofstream(dir / "t.kpt", std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  try {
    load_checkpoint(dir / "t.kpt");
  } catch (const Error&) {
    ++rejected;
  }
  ++cuts;
  v.detail << "  " << rejected << "/" << cuts << " truncated checkpoints rejected\n";
  v.require(rejected == cuts, "every truncation rejected with a library error");
}

}  // namespace

int main() {
  criterion("gradient fidelity", gradient_fidelity);
  criterion("numerical-kernel oracles", kernel_oracles);
  criterion("split correctness", split_correctness);
  criterion("metric oracles", metric_oracles);
  criterion("configuration semantics", configuration_semantics);
  criterion("protocol semantics", protocol_semantics);
  criterion("determinism", determinism);
  criterion("directional reproduction", directional);
  criterion("round-trip integrity", round_trip);
  std::cout << failures << " of 9 criteria failed\n";
  return 0;
}
