#include "kpt/hourglass.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <unordered_map>

#include "kpt/random.hpp"

namespace kpt {

void HourglassArch::validate() const {
  auto fail = [](const std::string& why) { throw UsageError("invalid hourglass arch: " + why); };
  if (num_stacks == 0) fail("num_stacks must be positive");
  if (depth == 0) fail("depth must be positive");
  if (base_channels < 2 || base_channels % 2 != 0) fail("base_channels must be even and >= 2");
  if (num_output_channels == 0) fail("num_output_channels must be positive");
  if (input_resolution == 0 || heatmap_resolution == 0) fail("resolutions must be positive");
  if (input_resolution % 4 != 0 || heatmap_resolution * 4 != input_resolution) {
    fail("heatmap_resolution (" + std::to_string(heatmap_resolution) +
         ") must equal input_resolution / 4 (input " + std::to_string(input_resolution) + ")");
  }
  if (depth >= 8 * sizeof(std::size_t) || (heatmap_resolution >> depth) == 0 ||
      (heatmap_resolution % (std::size_t{1} << depth)) != 0) {
    fail("heatmap_resolution " + std::to_string(heatmap_resolution) +
         " is not divisible by 2^depth (depth " + std::to_string(depth) + ")");
  }
}

void to_json(nlohmann::json& j, const HourglassArch& a) {
  j = nlohmann::json{{"num_stacks", a.num_stacks},
                     {"depth", a.depth},
                     {"base_channels", a.base_channels},
                     {"input_resolution", a.input_resolution},
                     {"heatmap_resolution", a.heatmap_resolution},
                     {"num_output_channels", a.num_output_channels}};
}

void from_json(const nlohmann::json& j, HourglassArch& a) {
  HourglassArch d;
  a.num_stacks = j.value("num_stacks", d.num_stacks);
  a.depth = j.value("depth", d.depth);
  a.base_channels = j.value("base_channels", d.base_channels);
  a.input_resolution = j.value("input_resolution", d.input_resolution);
  a.heatmap_resolution = j.value("heatmap_resolution", a.input_resolution / 4);
  a.num_output_channels = j.value("num_output_channels", d.num_output_channels);
}

std::string unit_prefix(std::size_t unit) { return "unit" + std::to_string(unit) + "."; }

namespace detail {

template <class T>
struct Builder {
  std::uint64_t seed;
  std::function<void(const std::string&, BasicTensor<T>, bool)> reg;

  BasicTensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    Rng rng(derive_seed({seed, fnv1a(name)}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
    auto t = BasicTensor<T>::from_data(std::move(shape), std::move(values), true);
    reg(name, t, false);
    return t;
  }

  BasicTensor<T> constant(const std::string& name, Shape shape, T value, bool buffer) {
    auto t = BasicTensor<T>::full(std::move(shape), value, !buffer);
    reg(name, t, buffer);
    return t;
  }
};

template <class T>
struct Conv {
  BasicTensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  static Conv make(Builder<T>& b, const std::string& prefix, std::size_t cin, std::size_t cout,
                   std::size_t k, std::size_t stride = 1, std::size_t pad = 0) {
    Conv c;
    c.weight = b.uniform(prefix + "weight", {cout, cin, k, k}, cin * k * k);
    c.bias = b.constant(prefix + "bias", {cout}, T(0), false);
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return conv2d(x, weight, bias, stride, pad);
  }
};

template <class T>
struct BatchNorm {
  BasicTensor<T> gamma, beta;
  BatchNormStats<T> stats;

  static BatchNorm make(Builder<T>& b, const std::string& prefix, std::size_t channels) {
    BatchNorm n;
    n.gamma = b.constant(prefix + "gamma", {channels}, T(1), false);
    n.beta = b.constant(prefix + "beta", {channels}, T(0), false);
    n.stats.mean = b.constant(prefix + "running_mean", {channels}, T(0), true);
    n.stats.var = b.constant(prefix + "running_var", {channels}, T(1), true);
    return n;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, NetMode mode) {
    // A frozen batchnorm behaves as in eval mode.
    const bool use_batch = mode == NetMode::train && gamma.requires_grad();
    return batchnorm2d(x, gamma, beta, stats, T(1e-5), T(0.1),
                       use_batch ? BatchNormMode::train : BatchNormMode::eval);
  }
};

// Pre-activation bottleneck: bn-relu-1x1 (halve), bn-relu-3x3, bn-relu-1x1
// (restore), plus identity or 1x1 skip.
template <class T>
struct Residual {
  std::string name;
  BatchNorm<T> bn1, bn2, bn3;
  Conv<T> c1, c2, c3;
  std::optional<Conv<T>> skip;

  static Residual make(Builder<T>& b, const std::string& prefix, std::size_t cin,
                       std::size_t cout) {
    const std::size_t mid = std::max<std::size_t>(1, cout / 2);
    Residual r;
    r.name = prefix.substr(0, prefix.size() - 1);
    r.bn1 = BatchNorm<T>::make(b, prefix + "bn1.", cin);
    r.c1 = Conv<T>::make(b, prefix + "conv1.", cin, mid, 1);
    r.bn2 = BatchNorm<T>::make(b, prefix + "bn2.", mid);
    r.c2 = Conv<T>::make(b, prefix + "conv2.", mid, mid, 3, 1, 1);
    r.bn3 = BatchNorm<T>::make(b, prefix + "bn3.", mid);
    r.c3 = Conv<T>::make(b, prefix + "conv3.", mid, cout, 1);
    if (cin != cout) r.skip = Conv<T>::make(b, prefix + "skip.", cin, cout, 1);
    return r;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, NetMode mode) {
    auto y = c1(relu(bn1(x, mode)));
    y = c2(relu(bn2(y, mode)));
    y = c3(relu(bn3(y, mode)));
    auto out = add(y, skip ? (*skip)(x) : x);
    check_finite(out, name);
    return out;
  }
};

template <class T>
struct Level {
  Residual<T> up1, low1, low3;
  std::unique_ptr<Level> inner;
  std::optional<Residual<T>> bottom;

  static std::unique_ptr<Level> make(Builder<T>& b, const std::string& prefix, std::size_t depth,
                                     std::size_t channels) {
    auto l = std::make_unique<Level>();
    l->up1 = Residual<T>::make(b, prefix + "up1.", channels, channels);
    l->low1 = Residual<T>::make(b, prefix + "low1.", channels, channels);
    if (depth > 1) {
      l->inner = make(b, prefix + "inner.", depth - 1, channels);
    } else {
      l->bottom = Residual<T>::make(b, prefix + "bottom.", channels, channels);
    }
    l->low3 = Residual<T>::make(b, prefix + "low3.", channels, channels);
    return l;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, NetMode mode) {
    auto up = up1(x, mode);
    auto low = low1(maxpool2(x).output, mode);
    low = inner ? (*inner)(low, mode) : (*bottom)(low, mode);
    low = low3(low, mode);
    return add(up, upsample_nearest2(low));
  }
};

template <class T>
struct Stem {
  Conv<T> conv;
  BatchNorm<T> bn;
  Residual<T> res;

  static std::unique_ptr<Stem> make(Builder<T>& b, std::size_t channels) {
    auto s = std::make_unique<Stem>();
    s->conv = Conv<T>::make(b, "stem.conv.", 3, channels, 4, 2, 1);
    s->bn = BatchNorm<T>::make(b, "stem.bn.", channels);
    s->res = Residual<T>::make(b, "stem.res.", channels, channels);
    return s;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, NetMode mode) {
    auto y = relu(bn(conv(x), mode));
    check_finite(y, "stem.conv");
    return maxpool2(res(y, mode)).output;
  }
};

template <class T>
struct Unit {
  std::string prefix;
  std::unique_ptr<Level<T>> hourglass;
  Residual<T> res;
  Conv<T> lin;
  BatchNorm<T> lin_bn;
  Conv<T> head;
  std::optional<Conv<T>> remap_features, remap_heatmaps;

  static std::unique_ptr<Unit> make(Builder<T>& b, std::size_t index, const HourglassArch& arch,
                                    std::size_t head_channels, bool final_unit) {
    const auto p = unit_prefix(index);
    const auto c = arch.base_channels;
    auto u = std::make_unique<Unit>();
    u->prefix = p;
    u->hourglass = Level<T>::make(b, p + "hg.", arch.depth, c);
    u->res = Residual<T>::make(b, p + "res.", c, c);
    u->lin = Conv<T>::make(b, p + "lin.conv.", c, c, 1);
    u->lin_bn = BatchNorm<T>::make(b, p + "lin.bn.", c);
    u->head = Conv<T>::make(b, p + "head.", c, head_channels, 1);
    if (!final_unit) {
      u->remap_features = Conv<T>::make(b, p + "remap_features.", c, c, 1);
      u->remap_heatmaps = Conv<T>::make(b, p + "remap_heatmaps.", head_channels, c, 1);
    }
    return u;
  }
};

}  // namespace detail

template <class T>
StackedHourglassNet<T>::StackedHourglassNet() = default;
template <class T>
StackedHourglassNet<T>::~StackedHourglassNet() = default;
template <class T>
StackedHourglassNet<T>::StackedHourglassNet(StackedHourglassNet&&) noexcept = default;
template <class T>
StackedHourglassNet<T>& StackedHourglassNet<T>::operator=(StackedHourglassNet&&) noexcept =
    default;

template <class T>
void StackedHourglassNet<T>::register_tensor(const std::string& name, BasicTensor<T> tensor,
                                             bool is_buffer) {
  tensors_.push_back({name, std::move(tensor), is_buffer});
}

template <class T>
StackedHourglassNet<T> StackedHourglassNet<T>::build(const HourglassArch& arch,
                                                     std::uint64_t seed,
                                                     std::vector<std::size_t> head_channels) {
  arch.validate();
  if (head_channels.empty()) head_channels.assign(arch.num_stacks, arch.num_output_channels);
  if (head_channels.size() != arch.num_stacks) {
    throw UsageError("head_channels has " + std::to_string(head_channels.size()) +
                     " entries for " + std::to_string(arch.num_stacks) + " stacks");
  }
  StackedHourglassNet net;
  net.arch_ = arch;
  net.arch_.num_output_channels = head_channels.back();
  net.head_channels_ = std::move(head_channels);
  detail::Builder<T> b{seed, [&net](const std::string& name, BasicTensor<T> t, bool buffer) {
                         net.register_tensor(name, std::move(t), buffer);
                       }};
  net.stem_ = detail::Stem<T>::make(b, arch.base_channels);
  for (std::size_t u = 0; u < arch.num_stacks; ++u) {
    net.units_.push_back(
        detail::Unit<T>::make(b, u, arch, net.head_channels_[u], u + 1 == arch.num_stacks));
  }
  return net;
}

template <class T>
StackedHourglassNet<T> StackedHourglassNet<T>::clone() const {
  auto copy = build(arch_, 0, head_channels_);
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto dst = copy.tensors_[i].tensor.mutable_data();
    const auto src = tensors_[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  copy.set_frozen(frozen_);
  copy.mode_ = mode_;
  return copy;
}

template <class T>
std::vector<BasicTensor<T>> StackedHourglassNet<T>::forward(const BasicTensor<T>& batch) {
  if (batch.dim() != 4 || batch.extent(1) != 3 || batch.extent(2) != arch_.input_resolution ||
      batch.extent(3) != arch_.input_resolution) {
    throw UsageError("hourglass forward expects [B,3," + std::to_string(arch_.input_resolution) +
                     "," + std::to_string(arch_.input_resolution) + "], got " +
                     shape_str(batch.shape()));
  }
  std::vector<BasicTensor<T>> heatmaps;
  auto x = (*stem_)(batch, mode_);
  for (std::size_t u = 0; u < units_.size(); ++u) {
    auto& unit = *units_[u];
    auto features = unit.res((*unit.hourglass)(x, mode_), mode_);
    features = relu(unit.lin_bn(unit.lin(features), mode_));
    auto hm = unit.head(features);
    check_finite(hm, unit.prefix + "head");
    heatmaps.push_back(hm);
    if (unit.remap_features) {
      x = add(add(x, (*unit.remap_features)(features)), (*unit.remap_heatmaps)(hm));
    }
  }
  return heatmaps;
}

template <class T>
std::vector<NamedTensor<T>> StackedHourglassNet<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& t : tensors_)
    if (!t.is_buffer) out.push_back(t);
  return out;
}

template <class T>
BasicTensor<T> StackedHourglassNet<T>::find(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t.tensor;
  throw UsageError("no tensor named '" + name + "' in network");
}

template <class T>
std::size_t StackedHourglassNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_)
    if (!t.is_buffer) n += t.tensor.numel();
  return n;
}

template <class T>
void StackedHourglassNet<T>::replace_head(std::size_t unit, std::size_t channels,
                                          std::uint64_t seed) {
  if (unit >= units_.size()) {
    throw UsageError("replace_head: unit index " + std::to_string(unit) + " out of range (" +
                     std::to_string(units_.size()) + " units)");
  }
  if (channels == 0) throw UsageError("replace_head: channel count must be positive");
  std::unordered_map<std::string, NamedTensor<T>> fresh;
  detail::Builder<T> b{seed, [&fresh](const std::string& name, BasicTensor<T> t, bool buffer) {
                         fresh[name] = {name, std::move(t), buffer};
                       }};
  auto& u = *units_[unit];
  const auto c = arch_.base_channels;
  u.head = detail::Conv<T>::make(b, u.prefix + "head.", c, channels, 1);
  if (u.remap_heatmaps) {
    u.remap_heatmaps = detail::Conv<T>::make(b, u.prefix + "remap_heatmaps.", channels, c, 1);
  }
  for (auto& t : tensors_) {
    auto it = fresh.find(t.name);
    if (it != fresh.end()) t.tensor = it->second.tensor;
  }
  head_channels_[unit] = channels;
  if (unit + 1 == units_.size()) arch_.num_output_channels = channels;
  set_frozen(frozen_);
}

template <class T>
void StackedHourglassNet<T>::set_frozen(const std::set<std::string>& names) {
  for (const auto& n : names) find(n);
  frozen_ = names;
  for (auto& t : tensors_) {
    if (!t.is_buffer) t.tensor.set_requires_grad(!names.contains(t.name));
  }
}

template <class T>
void StackedHourglassNet<T>::zero_grad() {
  for (auto& t : tensors_) t.tensor.zero_grad();
}

template class StackedHourglassNet<float>;
template class StackedHourglassNet<double>;

std::size_t parameter_count(const HourglassArch& arch) {
  return HourglassNet::build(arch, 0).parameter_count();
}

}  // namespace kpt
