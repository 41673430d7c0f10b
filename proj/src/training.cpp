#include "kpt/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "kpt/error.hpp"
#include "kpt/eval.hpp"
#include "kpt/image.hpp"
#include "kpt/ops.hpp"

namespace kpt {

namespace {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("training config: invalid value for '") + key + "'");
  }
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw UsageError(where + ": unknown key '" + k + "'");
  }
}

}  // namespace

void TrainingConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw UsageError(std::string("training config: ") + name + " must be positive");
  };
  positive(learning_rate, "learning_rate");
  positive(rmsprop_eps, "rmsprop_eps");
  positive(sigma, "sigma");
  if (!(lr_decay_factor > 1.0)) throw UsageError("training config: lr_decay_factor must exceed 1");
  if (!(rmsprop_alpha > 0.0 && rmsprop_alpha < 1.0)) throw UsageError("training config: rmsprop_alpha must lie in (0, 1)");
  if (plateau_patience_epochs == 0) throw UsageError("training config: plateau_patience_epochs must be positive");
  if (early_stop_patience_epochs == 0) throw UsageError("training config: early_stop_patience_epochs must be positive");
  if (iterations_per_epoch == 0) throw UsageError("training config: iterations_per_epoch must be positive");
  if (batch_size == 0) throw UsageError("training config: batch_size must be positive");
  if (max_epochs == 0) throw UsageError("training config: max_epochs must be positive");
  if (!(augment.scale_min > 0.0) || augment.scale_min > augment.scale_max)
    throw UsageError("training config: need 0 < scale_min <= scale_max");
  if (!(augment.rot_max_deg >= 0.0)) throw UsageError("training config: rot_max_deg must be non-negative");
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"lr_decay_factor", c.lr_decay_factor},
       {"plateau_patience_epochs", c.plateau_patience_epochs},
       {"early_stop_patience_epochs", c.early_stop_patience_epochs},
       {"iterations_per_epoch", c.iterations_per_epoch},
       {"batch_size", c.batch_size},
       {"rmsprop_alpha", c.rmsprop_alpha},
       {"rmsprop_eps", c.rmsprop_eps},
       {"augment",
        {{"enabled", c.augment.enabled},
         {"scale_min", c.augment.scale_min},
         {"scale_max", c.augment.scale_max},
         {"rot_max_deg", c.augment.rot_max_deg}}},
       {"seed", c.seed},
       {"max_epochs", c.max_epochs},
       {"sigma", c.sigma},
       {"log_wall_time", c.log_wall_time}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
  reject_unknown(j,
                 {"learning_rate", "lr_decay_factor", "plateau_patience_epochs", "early_stop_patience_epochs",
                  "iterations_per_epoch", "batch_size", "rmsprop_alpha", "rmsprop_eps", "augment", "seed",
                  "max_epochs", "sigma", "log_wall_time"},
                 "training config");
  c = TrainingConfig{};
  read_key(j, "learning_rate", c.learning_rate);
  read_key(j, "lr_decay_factor", c.lr_decay_factor);
  read_key(j, "plateau_patience_epochs", c.plateau_patience_epochs);
  read_key(j, "early_stop_patience_epochs", c.early_stop_patience_epochs);
  read_key(j, "iterations_per_epoch", c.iterations_per_epoch);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "rmsprop_alpha", c.rmsprop_alpha);
  read_key(j, "rmsprop_eps", c.rmsprop_eps);
  read_key(j, "seed", c.seed);
  read_key(j, "max_epochs", c.max_epochs);
  read_key(j, "sigma", c.sigma);
  read_key(j, "log_wall_time", c.log_wall_time);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    reject_unknown(a, {"enabled", "scale_min", "scale_max", "rot_max_deg"}, "training config augment");
    read_key(a, "enabled", c.augment.enabled);
    read_key(a, "scale_min", c.augment.scale_min);
    read_key(a, "scale_max", c.augment.scale_max);
    read_key(a, "rot_max_deg", c.augment.rot_max_deg);
  }
  c.validate();
}

std::string to_string(Domain d) {
  switch (d) {
    case Domain::none: return "none";
    case Domain::s1: return "S1";
    case Domain::s2: return "S2";
  }
  return "?";
}

void SupervisionPlan::validate(std::size_t num_units) const {
  if (units.size() != num_units)
    throw UsageError("supervision plan covers " + std::to_string(units.size()) + " units, network has " +
                     std::to_string(num_units));
  bool any = false;
  for (const auto& u : units) any = any || u.target != Domain::none;
  if (!any) throw UsageError("supervision plan supervises no unit");
}

const std::vector<JointId>& domain_joints(const JointSubsetSplit& split, Domain d) {
  if (d == Domain::s1) return split.s1;
  if (d == Domain::s2) return split.s2;
  throw UsageError("unsupervised unit has no joint domain");
}

Tensor supervised_loss(const std::vector<Tensor>& heads, const std::vector<Tensor>& targets,
                       const SupervisionPlan& plan, std::vector<double>* unit_losses) {
  plan.validate(heads.size());
  if (targets.size() != heads.size()) throw UsageError("one target slot per unit is required");
  Tensor total;
  if (unit_losses) unit_losses->assign(heads.size(), 0.0);
  for (std::size_t u = 0; u < heads.size(); ++u) {
    if (plan.units[u].target == Domain::none) continue;
    auto l = mse_loss(heads[u], targets[u]);
    if (unit_losses) (*unit_losses)[u] = l.item();
    total = total.defined() ? add(total, l) : l;
  }
  return total;
}

void rmsprop_step(const std::vector<NamedTensor<float>>& params, RmsPropState& state, double lr, double alpha,
                  double eps, const std::set<std::string>& mask) {
  for (const auto& p : params) {
    if (p.is_buffer || mask.contains(p.name) || !p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(i));
  }
  for (auto p : params) {
    if (p.is_buffer || mask.contains(p.name) || !p.tensor.has_grad()) continue;
    auto& v = state.square_avg[p.name];
    if (v.empty()) v.assign(p.tensor.numel(), 0.0f);
    if (v.size() != p.tensor.numel()) throw InconsistentError("optimizer state shape changed for '" + p.name + "'");
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double vi = alpha * v[i] + (1.0 - alpha) * gi * gi;
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - lr * gi / (std::sqrt(static_cast<double>(v[i])) + eps));
    }
  }
}

PlateauScheduler::PlateauScheduler(std::size_t patience, double factor) : patience_(patience), factor_(factor) {
  if (patience == 0) throw UsageError("plateau patience must be positive");
  if (!(factor > 1.0)) throw UsageError("plateau factor must exceed 1");
}

double PlateauScheduler::step(double accuracy, double lr) {
  if (accuracy > best_) {
    best_ = accuracy;
    counter_ = 0;
    return lr;
  }
  if (++counter_ < patience_) return lr;
  counter_ = 0;
  return lr / factor_;
}

std::vector<double> plateau_schedule(const std::vector<double>& accuracies, double lr, std::size_t patience,
                                     double factor) {
  PlateauScheduler s(patience, factor);
  std::vector<double> out;
  for (double a : accuracies) out.push_back(lr = s.step(a, lr));
  return out;
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw UsageError("early-stop patience must be positive");
}

bool EarlyStopper::step(double accuracy) {
  if (accuracy > best_) {
    best_ = accuracy;
    counter_ = 0;
    return false;
  }
  return ++counter_ >= patience_;
}

std::size_t early_stop_epoch(const std::vector<double>& accuracies, std::size_t patience) {
  EarlyStopper s(patience);
  for (std::size_t e = 0; e < accuracies.size(); ++e)
    if (s.step(accuracies[e])) return e + 1;
  return 0;
}

AugmentDraw draw_augmentation(Rng& rng, const AugmentConfig& cfg) {
  AugmentDraw d;
  d.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  d.rotation_deg = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg);
  return d;
}

Sample augment(const Sample& sample, const AugmentDraw& draw) {
  const std::size_t r = sample.image.height;
  const Affine2 m = augmentation_affine(draw.scale, draw.rotation_deg, r);
  return {warp_affine(sample.image, m, r, sample.image.width), transform_pose(sample.pose, m, r)};
}

Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg) {
  return augment(sample, draw_augmentation(rng, cfg));
}

std::vector<PoseAnnotation> quantized_annotations(const Dataset& dataset, const std::vector<JointId>& subset,
                                                  std::size_t heatmap_resolution, double sigma) {
  std::vector<PoseAnnotation> out;
  out.reserve(dataset.size());
  std::vector<float> map(heatmap_resolution * heatmap_resolution);
  for (const auto& s : dataset.samples) {
    PoseAnnotation p = s.pose;
    for (auto j : subset) {
      if (!p[j].visible) continue;
      render_heatmaps_into(s.pose, {j}, dataset.resolution, heatmap_resolution, sigma, map);
      const auto d = decode_map(map, heatmap_resolution, dataset.resolution);
      p[j].x = d.x;
      p[j].y = d.y;
    }
    out.push_back(p);
  }
  return out;
}

namespace {

double accuracy_against(HourglassNet& net, const Dataset& val, const std::vector<PoseAnnotation>& gt,
                        const std::vector<JointId>& subset) {
  const MetricSpec spec{0.5, Normalization::heatmap_tenth, val.resolution, net.arch().heatmap_resolution};
  const auto report = pck(predict(net, val), gt, subset, spec);
  std::size_t correct = 0, total = 0;
  for (const auto& j : report.joints) correct += j.correct, total += j.total;
  return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

double validation_accuracy(HourglassNet& net, const Dataset& val, const std::vector<JointId>& subset, double sigma) {
  return accuracy_against(net, val, quantized_annotations(val, subset, net.arch().heatmap_resolution, sigma), subset);
}

TrainingResult run_training(HourglassNet& net, const SupervisionPlan& plan, const JointSubsetSplit& split,
                            const Dataset& train, const Dataset& val, const TrainingConfig& config,
                            const TrainingCallbacks& callbacks) {
  config.validate();
  split.validate();
  const auto& arch = net.arch();
  const std::size_t units = net.head_channels().size();
  plan.validate(units);
  for (const auto* ds : {&train, &val})
    if (ds->resolution != arch.input_resolution)
      throw UsageError("dataset resolution " + std::to_string(ds->resolution) + " does not match network input " +
                       std::to_string(arch.input_resolution));
  if (train.size() == 0 || val.size() == 0) throw UsageError("training and validation sets must be non-empty");
  for (std::size_t u = 0; u < units; ++u) {
    if (plan.units[u].target != Domain::none &&
        domain_joints(split, plan.units[u].target).size() != net.head_channels()[u])
      throw UsageError("unit " + std::to_string(u) + " has " + std::to_string(net.head_channels()[u]) +
                       " head channels but its target domain has " +
                       std::to_string(domain_joints(split, plan.units[u].target).size()) + " joints");
    if (!plan.units[u].trainable)
      for (const auto& p : net.parameters())
        if (p.name.rfind(unit_prefix(u), 0) == 0 && !net.frozen().contains(p.name))
          throw InconsistentError("unit " + std::to_string(u) + " is marked untrainable but '" + p.name +
                                  "' is not frozen");
  }
  if (plan.units.back().target == Domain::none) throw UsageError("the final unit must be supervised");

  const std::size_t r = arch.input_resolution, hm = arch.heatmap_resolution, b = config.batch_size;
  const auto& val_subset = domain_joints(split, plan.units.back().target);
  const auto val_gt = quantized_annotations(val, val_subset, hm, config.sigma);

  TrainingResult result{net.clone(), {}, 0.0, 0.0, 0};
  result.initial_accuracy = accuracy_against(net, val, val_gt, val_subset);
  result.best_accuracy = -std::numeric_limits<double>::infinity();

  RmsPropState state;
  PlateauScheduler scheduler(config.plateau_patience_epochs, config.lr_decay_factor);
  EarlyStopper stopper(config.early_stop_patience_epochs);
  double lr = config.learning_rate;
  const auto params = net.parameters();
  const auto& mask = net.frozen();

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed({config.seed, epoch, 0x5A4D}));
    shuffle_rng.shuffle(order);

    net.set_mode(NetMode::train);
    double loss_sum = 0.0;
    for (std::size_t it = 0; it < config.iterations_per_epoch; ++it) try {
      std::vector<std::size_t> indices(b);
      std::vector<float> input(b * 3 * r * r);
      std::vector<std::vector<float>> target_data(units);
      for (std::size_t u = 0; u < units; ++u) target_data[u].assign(b * net.head_channels()[u] * hm * hm, 0.0f);
      for (std::size_t slot = 0; slot < b; ++slot) {
        indices[slot] = order[(it * b + slot) % order.size()];
        const Sample& src = train.samples[indices[slot]];
        Sample s;
        if (config.augment.enabled) {
          Rng rng(derive_seed({config.seed, epoch, it, slot}));
          s = augment(src, rng, config.augment);
        } else {
          s = src;
        }
        std::copy(s.image.data.begin(), s.image.data.end(),
                  input.begin() + static_cast<std::ptrdiff_t>(slot * 3 * r * r));
        for (std::size_t u = 0; u < units; ++u) {
          if (plan.units[u].target == Domain::none) continue;
          const std::size_t c = net.head_channels()[u];
          render_heatmaps_into(s.pose, domain_joints(split, plan.units[u].target), r, hm, config.sigma,
                               std::span<float>(target_data[u]).subspan(slot * c * hm * hm, c * hm * hm));
        }
      }
      const Tensor batch = Tensor::from_data({b, 3, r, r}, std::move(input));
      std::vector<Tensor> targets(units);
      for (std::size_t u = 0; u < units; ++u)
        if (plan.units[u].target != Domain::none)
          targets[u] = Tensor::from_data({b, net.head_channels()[u], hm, hm}, std::move(target_data[u]));

      net.zero_grad();
      const auto heads = net.forward(batch);
      std::vector<double> unit_losses;
      const Tensor loss = supervised_loss(heads, targets, plan, &unit_losses);
      const double value = loss.item();
      if (!std::isfinite(value)) throw NumericError("non-finite loss");
      loss.backward();
      if (callbacks.after_backward)
        callbacks.after_backward(net, {epoch, it, &indices, &batch, &heads, &targets, value, &unit_losses});
      rmsprop_step(params, state, lr, config.rmsprop_alpha, config.rmsprop_eps, mask);
      loss_sum += value;
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " iteration " + std::to_string(it) + ": " + e.what());
    }
    net.zero_grad();

    const double accuracy = accuracy_against(net, val, val_gt, val_subset);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(config.iterations_per_epoch), accuracy, lr, std::nullopt};
    if (config.log_wall_time)
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
    if (accuracy > result.best_accuracy) {
      result.best_accuracy = accuracy;
      result.best_epoch = epoch;
      result.best = net.clone();
    }
    lr = scheduler.step(accuracy, lr);
    if (stopper.step(accuracy)) break;
  }
  result.best.set_mode(NetMode::eval);
  return result;
}

}  // namespace kpt
