#include "kpt/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "kpt/checkpoint.hpp"
#include "kpt/dataset.hpp"
#include "kpt/error.hpp"
#include "kpt/eval.hpp"
#include "kpt/random.hpp"

namespace kpt {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const RunDescriptor& r) {
  j = {{"run_id", r.run_id},
       {"dataset", r.dataset.string()},
       {"val_count", r.val_count},
       {"split_seed", r.split_seed},
       {"experiment", r.experiment}};
  if (!r.output_dir.empty()) j["output_dir"] = r.output_dir.string();
}

void from_json(const nlohmann::json& j, RunDescriptor& r) {
  if (!j.is_object()) throw UsageError("run config must be a JSON object");
  static const std::set<std::string> known{"run_id", "dataset", "val_count", "split_seed", "output_dir", "experiment"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw UsageError("run config: unknown key '" + k + "'");
  for (const char* k : {"run_id", "dataset", "experiment"})
    if (!j.contains(k)) throw UsageError(std::string("run config: missing '") + k + "'");
  r = RunDescriptor{};
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    if (j.contains("val_count")) r.val_count = j.at("val_count").get<std::size_t>();
    if (j.contains("split_seed")) r.split_seed = j.at("split_seed").get<std::uint64_t>();
    if (j.contains("output_dir")) r.output_dir = j.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("run config: ") + e.what());
  }
  r.experiment = j.at("experiment").get<ExperimentDescriptor>();
  if (r.run_id.empty() || r.run_id.find_first_of("/\\") != std::string::npos || r.run_id == "." || r.run_id == "..")
    throw UsageError("run config: run_id must be a plain non-empty name");
  if (r.val_count == 0) throw UsageError("run config: val_count must be positive");
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out.flush()) throw IoError("failed writing " + p.string());
}

nlohmann::json read_json(const fs::path& p, bool config) {
  const auto text = read_text(p);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    if (config) throw UsageError("config " + p.string() + " is not valid JSON: " + e.what());
    throw IoError(p.string() + " is not valid JSON: " + e.what());
  }
}

fs::path output_root(const fs::path& flag, const RunDescriptor& run) {
  if (!flag.empty()) return flag;
  if (!run.output_dir.empty()) return run.output_dir;
  if (const char* env = std::getenv("KPT_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

fs::path anchored(const fs::path& p, const fs::path& base) { return p.empty() || p.is_absolute() ? p : base / p; }

JointSubsetSplit split_from_arg(const std::string& arg) {
  if (arg.size() == 1) return builtin_split(arg);
  return load_split(arg);
}

std::uint64_t dataset_fingerprint(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (const auto& s : ds.samples) {
    mix(s.image.data.data(), s.image.data.size() * sizeof(float));
    for (const auto& kp : s.pose.joints) {
      mix(&kp.x, sizeof kp.x);
      mix(&kp.y, sizeof kp.y);
      mix(&kp.visible, sizeof kp.visible);
    }
    mix(&s.pose.head_len, sizeof s.pose.head_len);
  }
  return h;
}

int cmd_gen_data(std::uint64_t seed, std::size_t count, std::size_t resolution, const fs::path& out_dir,
                 const fs::path& mpii_annotations, const fs::path& mpii_images, std::ostream& out) {
  Dataset ds = mpii_annotations.empty() ? generate_synthetic(seed, count, resolution)
                                        : load_mpii(mpii_annotations, mpii_images, resolution);
  save_dataset(ds, out_dir);
  out << "wrote " << ds.size() << " samples to " << out_dir.string() << "\n";
  return kExitOk;
}

struct Stage1Source {
  Checkpoint checkpoint;
  std::string origin;
};

Stage1Source obtain_stage1(const RunDescriptor& run, const fs::path& root, const Dataset& train, const Dataset& val,
                           std::uint64_t data_id, std::ostream& out) {
  const auto& e = run.experiment;
  if (!e.stage1_checkpoint.empty()) {
    if (!fs::exists(e.stage1_checkpoint)) throw IoError("stage-1 checkpoint " + e.stage1_checkpoint + " not found");
    return {load_checkpoint(e.stage1_checkpoint), e.stage1_checkpoint};
  }
  nlohmann::json key = e.stage1_key();
  key["data"] = hex64(data_id);
  key["val_count"] = run.val_count;
  key["split_seed"] = run.split_seed;
  const auto dir = root / "stage1_cache" / hex64(fnv1a(key.dump()));
  const auto ckpt = dir / "best.kpt";
  if (fs::exists(ckpt)) {
    out << "stage 1: using cached " << ckpt.string() << "\n";
    return {load_checkpoint(ckpt), ckpt.string()};
  }
  fs::create_directories(dir);
  const auto history = dir / "history.jsonl";
  fs::remove(history);
  write_text(dir / "key.json", key.dump(2) + "\n");
  const auto split = e.resolve_split();
  TrainingCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) { append_results(history, r); };
  nlohmann::json desc = {{"stage", 1}, {"key", key}};
  const auto tmp = dir / "best.kpt.partial";
  const auto result = train_stage1(split, stage1_arch(e.arch, split.s1.size()), *e.stage1, e.seed, train, val, tmp,
                                   desc, cb);
  fs::rename(tmp, ckpt);
  out << "stage 1: trained " << result.history.size() << " epochs, best validation PCK "
      << format_double(result.best_accuracy) << " -> " << ckpt.string() << "\n";
  return {load_checkpoint(ckpt), ckpt.string()};
}

int cmd_train(const fs::path& config, const fs::path& out_flag, bool force, std::ostream& out) {
  if (!fs::exists(config)) throw UsageError("config file " + config.string() + " not found");
  auto run = read_json(config, true).get<RunDescriptor>();
  const auto base = config.parent_path();
  run.dataset = anchored(run.dataset, base);
  if (!run.experiment.stage1_checkpoint.empty())
    run.experiment.stage1_checkpoint = anchored(run.experiment.stage1_checkpoint, base).string();
  if (!run.experiment.split_file.empty())
    run.experiment.split_file = anchored(run.experiment.split_file, base).string();
  const auto root = output_root(out_flag, run);
  const auto run_dir = root / run.run_id;
  if (fs::exists(run_dir) && !fs::is_empty(run_dir)) {
    if (!force) throw UsageError("run directory " + run_dir.string() + " already exists; pass --force to replace it");
    fs::remove_all(run_dir);
  }
  const auto split = run.experiment.resolve_split();

  const Dataset data = load_dataset(run.dataset);
  if (run.val_count >= data.size())
    throw UsageError("val_count " + std::to_string(run.val_count) + " leaves no training samples out of " +
                     std::to_string(data.size()));
  const auto [train, val] = split_train_val(data, run.val_count, run.split_seed);

  std::optional<Stage1Source> stage1;
  if (needs_stage1(run.experiment.mode)) stage1 = obtain_stage1(run, root, train, val, dataset_fingerprint(data), out);

  auto experiment = assemble(run.experiment.mode, split, stage1 ? &stage1->checkpoint : nullptr, run.experiment.arch,
                             run.experiment.seed, run.experiment.rehead);

  fs::create_directories(run_dir);
  nlohmann::json desc = run;
  desc["resolved_split"] = split;
  desc["stage1_provenance"] = experiment.provenance;
  if (stage1) desc["stage1_source"] = stage1->origin;
  write_text(run_dir / "descriptor.json", desc.dump(2) + "\n");

  const auto history = run_dir / "history.jsonl";
  TrainingCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    append_results(history, r);
    out << "epoch " << r.epoch << " loss " << format_double(r.train_loss) << " val PCK "
        << format_double(r.val_accuracy) << " lr " << format_double(r.learning_rate) << "\n";
  };
  auto result = run_experiment(experiment, train, val, run.experiment.training, cb);
  save_checkpoint(result.best, run_dir / "best.kpt", desc);

  const auto metric = evaluate_model(result.best, val, split.s2, {});
  nlohmann::json report = {{"run_id", run.run_id},
                           {"mode", to_string(run.experiment.mode)},
                           {"split", split.name},
                           {"report", metric},
                           {"validation",
                            {{"initial_accuracy", result.initial_accuracy},
                             {"best_accuracy", result.best_accuracy},
                             {"best_epoch", result.best_epoch},
                             {"epochs", result.history.size()}}}};
  write_text(run_dir / "report.json", report.dump(2) + "\n");
  out << "run " << run.run_id << " (" << to_string(run.experiment.mode) << "): best epoch " << result.best_epoch
      << ", " << metric.metric << " average "
      << (metric.average ? format_double(*metric.average) : std::string("n/a")) << " -> " << run_dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const std::string& split_arg,
             const std::string& subset_arg, const std::string& metric, const std::string& normalization,
             double threshold, const fs::path& out_file, std::ostream& out) {
  if (!fs::exists(checkpoint)) throw IoError("checkpoint " + checkpoint.string() + " not found");
  if (!fs::exists(dataset)) throw IoError("dataset " + dataset.string() + " not found");
  const auto split = split_from_arg(split_arg);
  const auto& subset = subset_arg == "s1" ? split.s1 : split.s2;
  auto net = instantiate(load_checkpoint(checkpoint));
  const auto data = load_dataset(dataset);
  if (net.head_channels().back() != subset.size())
    throw InconsistentError("checkpoint predicts " + std::to_string(net.head_channels().back()) +
                            " joints but subset " + subset_arg + " of split " + split.name + " has " +
                            std::to_string(subset.size()));
  if (data.resolution != net.arch().input_resolution)
    throw InconsistentError("dataset resolution " + std::to_string(data.resolution) +
                            " does not match checkpoint input " + std::to_string(net.arch().input_resolution));
  MetricSpec spec;
  spec.threshold = threshold;
  spec.normalization = metric == "pckh" ? Normalization::head : normalization_from_string(normalization);
  const auto report = evaluate_model(net, data, subset, spec);
  const auto text = nlohmann::json(report).dump(2) + "\n";
  const auto target = out_file.empty() ? fs::path(checkpoint.string() + ".report.json") : out_file;
  write_text(target, text);
  out << text << render_table({{checkpoint.stem().string(), report}});
  return kExitOk;
}

std::vector<fs::path> run_dirs(const fs::path& runs) {
  if (!fs::is_directory(runs)) throw IoError("runs directory " + runs.string() + " not found");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_directory() && e.path().filename() != "stage1_cache") dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

// Pools counts over several runs of one configuration.
MetricReport pool_reports(const std::vector<MetricReport>& reports) {
  MetricReport r = reports.front();
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (reports[i].groups.size() != r.groups.size() || reports[i].metric != r.metric)
      throw InconsistentError("runs of one configuration report different metrics or groups");
    r.sample_count += reports[i].sample_count;
    for (std::size_t g = 0; g < r.groups.size(); ++g) {
      if (reports[i].groups[g].name != r.groups[g].name)
        throw InconsistentError("runs of one configuration report different joint groups");
      r.groups[g].correct += reports[i].groups[g].correct;
      r.groups[g].total += reports[i].groups[g].total;
    }
  }
  double sum = 0;
  std::size_t n = 0;
  for (auto& g : r.groups) {
    g.score.reset();
    if (g.total) g.score = 100.0 * static_cast<double>(g.correct) / static_cast<double>(g.total);
    if (g.in_average && g.score) sum += *g.score, ++n;
  }
  r.average.reset();
  if (n) r.average = sum / static_cast<double>(n);
  r.joints.clear();
  return r;
}

int cmd_report(const fs::path& runs, const std::string& split_filter, bool csv, const fs::path& out_file,
               std::ostream& out) {
  std::map<TransferMode, std::vector<MetricReport>> by_mode;
  std::set<std::string> splits;
  for (const auto& dir : run_dirs(runs)) {
    if (!fs::exists(dir / "report.json")) continue;
    const auto j = read_json(dir / "report.json", false);
    try {
      const auto split = j.at("split").get<std::string>();
      if (!split_filter.empty() && split != split_filter) continue;
      splits.insert(split);
      by_mode[transfer_mode_from_string(j.at("mode").get<std::string>())].push_back(j.at("report").get<MetricReport>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError((dir / "report.json").string() + ": " + e.what());
    }
  }
  if (by_mode.empty()) throw IoError("no run reports found under " + runs.string());
  if (splits.size() > 1) throw InconsistentError("runs cover different splits; pass --split to choose one");
  std::vector<std::pair<std::string, MetricReport>> rows;
  for (auto m : all_transfer_modes())
    if (by_mode.contains(m)) rows.emplace_back(display_name(m), pool_reports(by_mode[m]));
  const auto text = csv ? render_table_csv(rows) : render_table(rows);
  if (!out_file.empty()) write_text(out_file, text);
  out << text;
  return kExitOk;
}

int cmd_curves(const fs::path& runs, const fs::path& out_file, std::ostream& out) {
  std::vector<std::pair<std::string, RunHistory>> histories;
  for (const auto& dir : run_dirs(runs)) {
    if (!fs::exists(dir / "history.jsonl")) continue;
    RunHistory h;
    for (const auto& rec : read_results(dir / "history.jsonl")) {
      try {
        h.push_back(rec.get<EpochRecord>());
      } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "history.jsonl").string() + ": " + e.what());
      }
    }
    histories.emplace_back(dir.filename().string(), std::move(h));
  }
  if (histories.empty()) throw IoError("no run histories found under " + runs.string());
  const auto text = emit_curves(histories);
  if (!out_file.empty()) write_text(out_file, text);
  out << text;
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Keypoint-subset transfer experiments on stacked hourglass networks", "kpt"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::size_t count = 0, resolution = 32;
  std::string gen_out, mpii_ann, mpii_img;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic (or converted MPII) dataset");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--count", count, "Number of samples");
  gen->add_option("--resolution", resolution, "Image side in pixels");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--mpii-annotations", mpii_ann, "Convert this MPII annotation file instead");
  gen->add_option("--mpii-images", mpii_img, "Image directory for --mpii-annotations");

  std::string config, train_out;
  bool force = false;
  auto* train = app.add_subcommand("train", "Run stage 1 (when needed) and stage 2 of one experiment");
  train->add_option("--config", config, "Run config file")->required();
  train->add_option("--out", train_out, "Output root (default: config output_dir, $KPT_OUTPUT_ROOT, ./runs)");
  train->add_flag("--force", force, "Replace an existing run directory");

  std::string ckpt, dataset, split = "d", subset = "s2", metric = "pckh", norm = "head", eval_out;
  double threshold = 0.5;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--split", split, "Builtin split tag or split file");
  eval->add_option("--subset", subset, "s1 or s2")->check(CLI::IsMember({"s1", "s2"}));
  eval->add_option("--metric", metric, "pckh or pck")->check(CLI::IsMember({"pckh", "pck"}));
  eval->add_option("--normalization", norm, "head, bbox or heatmap_tenth (pck only)");
  eval->add_option("--threshold", threshold);
  eval->add_option("--out", eval_out, "Report file (default: <checkpoint>.report.json)");

  std::string runs, report_split, report_out;
  bool csv = false;
  auto* report = app.add_subcommand("report", "Comparison table over finished runs");
  report->add_option("--runs", runs)->required();
  report->add_option("--split", report_split, "Only runs on this split");
  report->add_flag("--csv", csv, "Comma-separated output");
  report->add_option("--out", report_out);

  std::string curve_runs, curve_out;
  auto* curves = app.add_subcommand("curves", "Per-epoch validation curves of finished runs");
  curves->add_option("--runs", curve_runs)->required();
  curves->add_option("--out", curve_out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      if (mpii_ann.empty() && count == 0) throw UsageError("gen-data: --count must be positive");
      if (!mpii_ann.empty() && mpii_img.empty()) throw UsageError("gen-data: --mpii-images is required with --mpii-annotations");
      return cmd_gen_data(seed, count, resolution, gen_out, mpii_ann, mpii_img, out);
    }
    if (*train) return cmd_train(config, train_out, force, out);
    if (*eval) return cmd_eval(ckpt, dataset, split, subset, metric, norm, threshold, eval_out, out);
    if (*report) return cmd_report(runs, report_split, csv, report_out, out);
    if (*curves) return cmd_curves(curve_runs, curve_out, out);
  } catch (const Error& e) {
    err << "kpt: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "kpt: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "kpt: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace kpt
