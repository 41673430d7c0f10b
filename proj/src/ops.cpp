#include "kpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

namespace kpt {

namespace {

thread_local BranchFingerprint* g_fingerprint = nullptr;

}  // namespace

BranchFingerprint::BranchFingerprint() : previous_(g_fingerprint) { g_fingerprint = this; }
BranchFingerprint::~BranchFingerprint() { g_fingerprint = previous_; }

namespace {

void fold_branch(std::uint64_t v) {
  for (auto* f = g_fingerprint; f; f = f->previous()) f->fold(v);
}

template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(TensorNode<T>&)> backward) {
  auto result = BasicTensor<T>::from_data(std::move(shape), std::move(data));
  if (!grad_enabled()) return result;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return result;
  auto* node = result.node();
  node->is_leaf = false;
  node->requires_grad = true;
  node->op = op;
  for (const auto* in : inputs) node->inputs.push_back(in->node_ptr());
  node->backward = std::move(backward);
  return result;
}

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (!t.defined()) throw UsageError(std::string(op) + ": " + what + " is undefined");
  if (t.dim() != rank) {
    throw UsageError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct ConvGeometry {
  std::ptrdiff_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;

  // Output index range [lo, hi] whose input coordinate o*stride + k - pad
  // falls inside [0, extent).
  std::pair<std::ptrdiff_t, std::ptrdiff_t> valid(std::ptrdiff_t k, std::ptrdiff_t extent,
                                                   std::ptrdiff_t out) const {
    std::ptrdiff_t lo = 0;
    if (pad > k) lo = (pad - k + stride - 1) / stride;
    std::ptrdiff_t hi = (extent - 1 + pad - k);
    hi = hi < 0 ? -1 : hi / stride;
    return {lo, std::min(hi, out - 1)};
  }
};

}  // namespace

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride == 0) throw UsageError("conv2d: stride must be positive");
  if (input.extent(1) != kernel.extent(1)) {
    throw UsageError("conv2d: input has " + std::to_string(input.extent(1)) +
                     " channels but kernel expects " + std::to_string(kernel.extent(1)));
  }
  if (bias.extent(0) != kernel.extent(0)) {
    throw UsageError("conv2d: bias length " + std::to_string(bias.extent(0)) +
                     " does not match filter count " + std::to_string(kernel.extent(0)));
  }
  ConvGeometry g{};
  g.n = static_cast<std::ptrdiff_t>(input.extent(0));
  g.c = static_cast<std::ptrdiff_t>(input.extent(1));
  g.h = static_cast<std::ptrdiff_t>(input.extent(2));
  g.w = static_cast<std::ptrdiff_t>(input.extent(3));
  g.f = static_cast<std::ptrdiff_t>(kernel.extent(0));
  g.kh = static_cast<std::ptrdiff_t>(kernel.extent(2));
  g.kw = static_cast<std::ptrdiff_t>(kernel.extent(3));
  g.stride = static_cast<std::ptrdiff_t>(stride);
  g.pad = static_cast<std::ptrdiff_t>(padding);
  const auto span_h = g.h + 2 * g.pad - g.kh;
  const auto span_w = g.w + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0) {
    throw UsageError("conv2d: kernel " + shape_str(kernel.shape()) +
                     " exceeds padded input " + shape_str(input.shape()));
  }
  if (span_h % g.stride != 0 || span_w % g.stride != 0) {
    throw UsageError("conv2d: output extent is not exact for input " + shape_str(input.shape()) +
                     ", kernel " + shape_str(kernel.shape()) + ", stride " +
                     std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  g.oh = span_h / g.stride + 1;
  g.ow = span_w / g.stride + 1;

  const T* in = input.data().data();
  const T* k = kernel.data().data();
  const T* b = bias.data().data();
  std::vector<T> out(static_cast<std::size_t>(g.n * g.f * g.oh * g.ow));
  const auto in_plane = g.h * g.w;
  const auto out_plane = g.oh * g.ow;

  for (std::ptrdiff_t n = 0; n < g.n; ++n) {
    for (std::ptrdiff_t f = 0; f < g.f; ++f) {
      T* o = out.data() + (n * g.f + f) * out_plane;
      std::fill(o, o + out_plane, b[f]);
      for (std::ptrdiff_t c = 0; c < g.c; ++c) {
        const T* ip = in + (n * g.c + c) * in_plane;
        for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
          const auto [oy_lo, oy_hi] = g.valid(ky, g.h, g.oh);
          for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
            const auto [ox_lo, ox_hi] = g.valid(kx, g.w, g.ow);
            const T wv = k[((f * g.c + c) * g.kh + ky) * g.kw + kx];
            for (auto oy = oy_lo; oy <= oy_hi; ++oy) {
              T* orow = o + oy * g.ow;
              const T* irow = ip + (oy * g.stride + ky - g.pad) * g.w;
              const auto shift = kx - g.pad;
              if (g.stride == 1) {
                for (auto ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox + shift];
              } else {
                for (auto ox = ox_lo; ox <= ox_hi; ++ox)
                  orow[ox] += wv * irow[ox * g.stride + shift];
              }
            }
          }
        }
      }
    }
  }

  Shape shape{static_cast<std::size_t>(g.n), static_cast<std::size_t>(g.f),
              static_cast<std::size_t>(g.oh), static_cast<std::size_t>(g.ow)};
  return make_result<T>(std::move(shape), std::move(out), "conv2d", {&input, &kernel, &bias},
                        [g](TensorNode<T>& self) {
    auto& x = *self.inputs[0];
    auto& kn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    const T* dy = self.grad.data();
    const auto in_plane = g.h * g.w;
    const auto out_plane = g.oh * g.ow;
    T* dx = x.requires_grad ? x.grad_buffer().data() : nullptr;
    T* dk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
    if (bn.requires_grad) {
      T* db = bn.grad_buffer().data();
      for (std::ptrdiff_t n = 0; n < g.n; ++n)
        for (std::ptrdiff_t f = 0; f < g.f; ++f) {
          const T* d = dy + (n * g.f + f) * out_plane;
          T acc = 0;
          for (std::ptrdiff_t i = 0; i < out_plane; ++i) acc += d[i];
          db[f] += acc;
        }
    }
    if (!dx && !dk) return;
    const T* xin = x.data.data();
    const T* kv = kn.data.data();
    for (std::ptrdiff_t n = 0; n < g.n; ++n) {
      for (std::ptrdiff_t f = 0; f < g.f; ++f) {
        const T* d = dy + (n * g.f + f) * out_plane;
        for (std::ptrdiff_t c = 0; c < g.c; ++c) {
          const auto ioff = (n * g.c + c) * in_plane;
          for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
            const auto [oy_lo, oy_hi] = g.valid(ky, g.h, g.oh);
            for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
              const auto [ox_lo, ox_hi] = g.valid(kx, g.w, g.ow);
              const auto kidx = ((f * g.c + c) * g.kh + ky) * g.kw + kx;
              const T wv = kv[kidx];
              T kacc = 0;
              for (auto oy = oy_lo; oy <= oy_hi; ++oy) {
                const T* drow = d + oy * g.ow;
                const auto roff = ioff + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
                for (auto ox = ox_lo; ox <= ox_hi; ++ox) {
                  const auto idx = roff + ox * g.stride;
                  if (dx) dx[idx] += wv * drow[ox];
                  kacc += drow[ox] * xin[idx];
                }
              }
              if (dk) dk[kidx] += kacc;
            }
          }
        }
      }
    }
  });
}

template <class T>
MaxPoolResult<T> maxpool2(const BasicTensor<T>& input) {
  require_rank(input, 4, "maxpool2", "input");
  const auto n = input.extent(0), c = input.extent(1), h = input.extent(2), w = input.extent(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw UsageError("maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  }
  const auto oh = h / 2, ow = w / 2;
  const T* in = input.data().data();
  std::vector<T> out(n * c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const auto idx = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const auto o = plane * oh * ow + oy * ow + ox;
        out[o] = in[best];
        arg[o] = best;
        if (g_fingerprint) fold_branch(best);
      }
    }
  }
  auto result = make_result<T>({n, c, oh, ow}, std::move(out), "maxpool2", {&input},
                               [arg](TensorNode<T>& self) {
    auto& x = *self.inputs[0];
    auto& dx = x.grad_buffer();
    for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += self.grad[o];
  });
  return {std::move(result), std::move(arg)};
}

template <class T>
BasicTensor<T> upsample_nearest2(const BasicTensor<T>& input) {
  require_rank(input, 4, "upsample_nearest2", "input");
  const auto n = input.extent(0), c = input.extent(1), h = input.extent(2), w = input.extent(3);
  const auto oh = 2 * h, ow = 2 * w;
  const T* in = input.data().data();
  std::vector<T> out(n * c * oh * ow);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[plane * oh * ow + y * ow + x] = in[plane * h * w + (y / 2) * w + x / 2];
  return make_result<T>({n, c, oh, ow}, std::move(out), "upsample_nearest2", {&input},
                        [n, c, h, w](TensorNode<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto oh = 2 * h, ow = 2 * w;
    for (std::size_t plane = 0; plane < n * c; ++plane)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
          dx[plane * h * w + (y / 2) * w + x / 2] += self.grad[plane * oh * ow + y * ow + x];
  });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v < T(0) ? T(0) : v;  // keeps NaN visible
  if (g_fingerprint) {
    for (std::size_t i = 0; i < out.size(); ++i) fold_branch((i << 1) | (out[i] > T(0)));
  }
  return make_result<T>(input.shape(), std::move(out), "relu", {&input}, [](TensorNode<T>& self) {
    auto& x = *self.inputs[0];
    auto& dx = x.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (x.data[i] > T(0)) dx[i] += self.grad[i];
  });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [](TensorNode<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& d = in->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(input.shape(), std::move(out), "scale", {&input},
                        [factor](TensorNode<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * self.grad[i];
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  T acc = 0;
  for (auto v : input.data()) acc += v;
  return make_result<T>({}, {acc}, "sum", {&input}, [](TensorNode<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (auto& v : d) v += self.grad[0];
  });
}

template <class T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same_shape(pred, target, "mse_loss");
  const auto p = pred.data(), t = target.data();
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - t[i];
    acc += d * d;
  }
  const T count = static_cast<T>(p.size());
  return make_result<T>({}, {acc / count}, "mse_loss", {&pred, &target},
                        [count](TensorNode<T>& self) {
    auto& pn = *self.inputs[0];
    auto& tn = *self.inputs[1];
    const T g = self.grad[0] * T(2) / count;
    if (pn.requires_grad) {
      auto& d = pn.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * (pn.data[i] - tn.data[i]);
    }
    if (tn.requires_grad) {
      auto& d = tn.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g * (pn.data[i] - tn.data[i]);
    }
  });
}

template <class T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormStats<T>& stats, T eps,
                           T momentum, BatchNormMode mode) {
  require_rank(input, 4, "batchnorm2d", "input");
  const auto n = input.extent(0), c = input.extent(1);
  const auto plane = input.extent(2) * input.extent(3);
  const Shape per_channel{c};
  if (gamma.shape() != per_channel || beta.shape() != per_channel ||
      stats.mean.shape() != per_channel || stats.var.shape() != per_channel) {
    throw UsageError("batchnorm2d: per-channel parameters must have shape " +
                     shape_str(per_channel) + " for input " + shape_str(input.shape()));
  }
  const T* x = input.data().data();
  const auto gv = gamma.data(), bv = beta.data();
  const auto count = n * plane;

  std::vector<T> mean(c), invstd(c);
  if (mode == BatchNormMode::train) {
    auto rmean = stats.mean.mutable_data();
    auto rvar = stats.var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      }
      const T m = acc / static_cast<T>(count);
      T sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - m) * (p[j] - m);
      }
      const T var = sq / static_cast<T>(count);
      mean[ch] = m;
      invstd[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      rmean[ch] = (T(1) - momentum) * rmean[ch] + momentum * m;
      rvar[ch] = (T(1) - momentum) * rvar[ch] + momentum * unbiased;
    }
  } else {
    const auto rmean = stats.mean.data(), rvar = stats.var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rmean[ch];
      invstd[ch] = T(1) / std::sqrt(rvar[ch] + eps);
    }
  }

  std::vector<T> out(input.numel()), xhat(input.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto off = (i * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const T h = (x[off + j] - mean[ch]) * invstd[ch];
        xhat[off + j] = h;
        out[off + j] = gv[ch] * h + bv[ch];
      }
    }

  const bool batch_stats = mode == BatchNormMode::train;
  return make_result<T>(input.shape(), std::move(out), "batchnorm2d", {&input, &gamma, &beta},
                        [n, c, plane, batch_stats, xhat = std::move(xhat),
                         invstd = std::move(invstd)](TensorNode<T>& self) {
    auto& xn = *self.inputs[0];
    auto& gn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    const T* dy = self.grad.data();
    const T count = static_cast<T>(n * plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto off = (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          sum_dy += dy[off + j];
          sum_dy_xhat += dy[off + j] * xhat[off + j];
        }
      }
      if (gn.requires_grad) gn.grad_buffer()[ch] += sum_dy_xhat;
      if (bn.requires_grad) bn.grad_buffer()[ch] += sum_dy;
      if (!xn.requires_grad) continue;
      auto& dx = xn.grad_buffer();
      const T scale_ch = gn.data[ch] * invstd[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const auto off = (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          if (batch_stats) {
            dx[off + j] += scale_ch * (dy[off + j] - sum_dy / count -
                                       xhat[off + j] * sum_dy_xhat / count);
          } else {
            dx[off + j] += scale_ch * dy[off + j];
          }
        }
      }
    }
  });
}

#define KPT_INSTANTIATE_OPS(T)                                                              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                 const BasicTensor<T>&, std::size_t, std::size_t);         \
  template MaxPoolResult<T> maxpool2(const BasicTensor<T>&);                                \
  template BasicTensor<T> upsample_nearest2(const BasicTensor<T>&);                         \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                       \
  template BasicTensor<T> mse_loss(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                      const BasicTensor<T>&, BatchNormStats<T>&, T, T,      \
                                      BatchNormMode);

KPT_INSTANTIATE_OPS(float)
KPT_INSTANTIATE_OPS(double)

#undef KPT_INSTANTIATE_OPS

}  // namespace kpt
