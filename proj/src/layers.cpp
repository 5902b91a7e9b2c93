#include "mactn/layers.hpp"

#include <cmath>
#include <memory>

namespace mactn {

// ---------------------------------------------------------------------------
// ParameterStore

Tensor ParameterStore::add_parameter(const std::string &name, Tensor value) {
  if (index_.count(name)) throw ContractError("ParameterStore: duplicate name '" + name + "'");
  value.set_requires_grad(true);
  index_[name] = {false, params_.size()};
  params_.emplace_back(name, value);
  return value;
}

Tensor ParameterStore::add_buffer(const std::string &name, Tensor value) {
  if (index_.count(name)) throw ContractError("ParameterStore: duplicate name '" + name + "'");
  value.set_requires_grad(false);
  index_[name] = {true, buffers_.size()};
  buffers_.emplace_back(name, value);
  return value;
}

Tensor ParameterStore::get(const std::string &name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParameterStore: unknown name '" + name + "'");
  return it->second.first ? buffers_[it->second.second].second : params_[it->second.second].second;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto &[_, t] : params_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto &[_, t] : params_) t.zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(params_.size() + buffers_.size());
  for (const auto &[_, t] : params_) out.emplace_back(t.data().begin(), t.data().end());
  for (const auto &[_, t] : buffers_) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void ParameterStore::restore(const std::vector<std::vector<double>> &values) {
  if (values.size() != params_.size() + buffers_.size()) throw ContractError("ParameterStore::restore: entry count mismatch");
  std::size_t k = 0;
  auto load = [&](std::vector<std::pair<std::string, Tensor>> &list) {
    for (auto &[name, t] : list) {
      const auto &src = values[k++];
      auto dst = t.mutable_data();
      if (src.size() != dst.size()) throw ContractError("ParameterStore::restore: size mismatch for '" + name + "'");
      std::copy(src.begin(), src.end(), dst.begin());
    }
  };
  load(params_);
  load(buffers_);
}

// ---------------------------------------------------------------------------
// Convolution

void Conv1dSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || groups == 0) throw DimensionError("Conv1dSpec: channel counts must be positive");
  if (kernel_size < 1) throw DimensionError("Conv1dSpec: kernel_size must be >= 1");
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw DimensionError("Conv1dSpec: groups=" + std::to_string(groups) + " must divide in_channels=" +
                         std::to_string(in_channels) + " and out_channels=" + std::to_string(out_channels));
  }
}

std::size_t Conv1dSpec::output_length(std::size_t input_length) const {
  const std::size_t padded = input_length + 2 * padding;
  if (padded < kernel_size) {
    throw DimensionError("conv1d: input length " + std::to_string(input_length) + " with padding " +
                         std::to_string(padding) + " is shorter than kernel " + std::to_string(kernel_size));
  }
  return padded - kernel_size + 1;
}

namespace {

struct Batched {
  Tensor x;
  bool squeezed = false;
};

Batched as_batched(const Tensor &x, const char *op) {
  if (x.dim() == 3) return {x, false};
  if (x.dim() == 2) return {reshape(x, {1, x.size(0), x.size(1)}), true};
  throw DimensionError(std::string(op) + ": expected [B, C, T] or [C, T], got " + shape_str(x.shape()));
}

Tensor unbatch(const Tensor &y, bool squeezed) {
  if (!squeezed) return y;
  return reshape(y, {y.size(1), y.size(2)});
}

} // namespace

Tensor conv1d(const Tensor &input, const Tensor &weight, const Tensor &bias, const Conv1dSpec &spec) {
  spec.validate();
  auto [x, squeezed] = as_batched(input, "conv1d");
  const std::size_t B = x.size(0), C = x.size(1), T = x.size(2);
  if (C != spec.in_channels) {
    throw DimensionError("conv1d: input has " + std::to_string(C) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw DimensionError("conv1d: weight " + shape_str(weight.shape()) + " does not match spec " +
                         shape_str(spec.weight_shape()));
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw DimensionError("conv1d: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t To = spec.output_length(T);
  const std::size_t K = spec.kernel_size, P = spec.padding;
  const std::size_t icpg = C / spec.groups, ocpg = spec.out_channels / spec.groups, Co = spec.out_channels;

  // Valid output range for tap j: t + j - P in [0, T).
  auto t_range = [=](std::size_t j) {
    const long lo = std::max<long>(0, static_cast<long>(P) - static_cast<long>(j));
    const long hi = std::min<long>(static_cast<long>(To), static_cast<long>(T + P) - static_cast<long>(j));
    return std::pair<long, long>{lo, std::max(lo, hi)};
  };

  std::vector<double> out(B * Co * To, 0.0);
  const double *xd = x.data().data();
  const double *wd = weight.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t oc = 0; oc < Co; ++oc) {
      double *o = out.data() + (b * Co + oc) * To;
      if (bias.defined()) std::fill(o, o + To, bias.data()[oc]);
      const std::size_t g = oc / ocpg;
      for (std::size_t ic = 0; ic < icpg; ++ic) {
        const double *xi = xd + (b * C + g * icpg + ic) * T;
        const double *w = wd + (oc * icpg + ic) * K;
        for (std::size_t j = 0; j < K; ++j) {
          const double wj = w[j];
          const auto [lo, hi] = t_range(j);
          const double *xs = xi + j - static_cast<long>(P);
          for (long t = lo; t < hi; ++t) o[t] += wj * xs[t];
        }
      }
    }
  }
  add_macs(static_cast<std::uint64_t>(B) * Co * icpg * K * To);

  auto y = make_result({B, Co, To}, std::move(out), {x, weight, bias.defined() ? bias : Tensor()},
                       [=](std::span<const double> g) mutable {
                         const double *xd = x.data().data();
                         const double *wd = weight.data().data();
                         std::vector<double> gx(x.requires_grad() ? x.numel() : 0, 0.0);
                         std::vector<double> gw(weight.requires_grad() ? weight.numel() : 0, 0.0);
                         for (std::size_t b = 0; b < B; ++b) {
                           for (std::size_t oc = 0; oc < Co; ++oc) {
                             const double *go = g.data() + (b * Co + oc) * To;
                             const std::size_t grp = oc / ocpg;
                             for (std::size_t ic = 0; ic < icpg; ++ic) {
                               const std::size_t xoff = (b * C + grp * icpg + ic) * T;
                               const std::size_t woff = (oc * icpg + ic) * K;
                               for (std::size_t j = 0; j < K; ++j) {
                                 const auto [lo, hi] = t_range(j);
                                 const long shift = static_cast<long>(j) - static_cast<long>(P);
                                 if (!gw.empty()) {
                                   const double *xs = xd + xoff + shift;
                                   double s = 0.0;
                                   for (long t = lo; t < hi; ++t) s += go[t] * xs[t];
                                   gw[woff + j] += s;
                                 }
                                 if (!gx.empty()) {
                                   const double wj = wd[woff + j];
                                   double *gs = gx.data() + xoff + shift;
                                   for (long t = lo; t < hi; ++t) gs[t] += wj * go[t];
                                 }
                               }
                             }
                           }
                         }
                         if (!gx.empty()) x.accumulate_grad(gx);
                         if (!gw.empty()) weight.accumulate_grad(gw);
                         if (bias.defined() && bias.requires_grad()) {
                           std::vector<double> gb(Co, 0.0);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t oc = 0; oc < Co; ++oc)
                               for (std::size_t t = 0; t < To; ++t) gb[oc] += g[(b * Co + oc) * To + t];
                           bias.accumulate_grad(gb);
                         }
                       });
  return unbatch(y, squeezed);
}

Tensor depthwise_conv1d(const Tensor &x, const Tensor &weight, const Conv1dSpec &spec, const Tensor &bias) {
  if (spec.groups != spec.in_channels) {
    throw DimensionError("depthwise_conv1d: groups (" + std::to_string(spec.groups) + ") must equal in_channels (" +
                         std::to_string(spec.in_channels) + ")");
  }
  return conv1d(x, weight, bias, spec);
}

Tensor pointwise_conv1d(const Tensor &x, const Tensor &weight, const Conv1dSpec &spec, const Tensor &bias) {
  if (spec.kernel_size != 1) throw DimensionError("pointwise_conv1d: kernel_size must be 1");
  return conv1d(x, weight, bias, spec);
}

Tensor separable_conv1d(const Tensor &x, const Tensor &depth_weight, const Conv1dSpec &depth_spec,
                        const Tensor &point_weight, const Conv1dSpec &point_spec) {
  if (depth_spec.out_channels != point_spec.in_channels) {
    throw DimensionError("separable_conv1d: depthwise produces " + std::to_string(depth_spec.out_channels) +
                         " channels, pointwise expects " + std::to_string(point_spec.in_channels));
  }
  return pointwise_conv1d(depthwise_conv1d(x, depth_weight, depth_spec), point_weight, point_spec);
}

// ---------------------------------------------------------------------------
// Normalization

BatchNorm1d::BatchNorm1d(std::size_t features)
    : gamma(Tensor::full({features}, 1.0, true)), beta(Tensor::zeros({features}, true)),
      running_mean(Tensor::zeros({features})), running_var(Tensor::full({features}, 1.0)) {}

BatchNorm1d::BatchNorm1d(std::size_t features, ParameterStore &store, const std::string &name)
    : BatchNorm1d(features) {
  gamma = store.add_parameter(name + ".gamma", gamma);
  beta = store.add_parameter(name + ".beta", beta);
  running_mean = store.add_buffer(name + ".running_mean", running_mean);
  running_var = store.add_buffer(name + ".running_var", running_var);
}

Tensor batch_norm1d(const Tensor &input, BatchNorm1d &state, Mode mode) {
  auto [x, squeezed] = as_batched(input, "batch_norm1d");
  const std::size_t B = x.size(0), C = x.size(1), T = x.size(2);
  if (state.gamma.numel() != C || state.beta.numel() != C || state.running_mean.numel() != C ||
      state.running_var.numel() != C) {
    throw ContractError("batch_norm1d: state sized for " + std::to_string(state.gamma.numel()) +
                        " features, input has " + std::to_string(C));
  }
  const std::size_t N = B * T;
  const double *xd = x.data().data();
  const double *gd = state.gamma.data().data();
  const double *bd = state.beta.data().data();

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  if (mode == Mode::Train) {
    if (N < 2) throw ContractError("batch_norm1d: train mode needs batch*time >= 2");
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) m += xd[(b * C + c) * T + t];
      m /= static_cast<double>(N);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
          const double d = xd[(b * C + c) * T + t] - m;
          v += d * d;
        }
      v /= static_cast<double>(N);
      const double is = 1.0 / std::sqrt(v + state.epsilon);
      (*inv_std)[c] = is;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
          const auto i = (b * C + c) * T + t;
          (*xhat)[i] = (xd[i] - m) * is;
        }
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * v * static_cast<double>(N) / static_cast<double>(N - 1);
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      if (rv[c] < 0.0) throw ContractError("batch_norm1d: negative running variance");
      const double is = 1.0 / std::sqrt(rv[c] + state.epsilon);
      (*inv_std)[c] = is;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
          const auto i = (b * C + c) * T + t;
          (*xhat)[i] = (xd[i] - rm[c]) * is;
        }
    }
  }

  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const auto i = (b * C + c) * T + t;
        out[i] = gd[c] * (*xhat)[i] + bd[c];
      }

  Tensor gamma = state.gamma, beta = state.beta;
  const bool train = mode == Mode::Train;
  auto y = make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [=](std::span<const double> g) mutable {
                         const double *gd = gamma.data().data();
                         std::vector<double> gg(C, 0.0), gbeta(C, 0.0), gx(x.requires_grad() ? x.numel() : 0);
                         for (std::size_t c = 0; c < C; ++c) {
                           double sg = 0.0, sgx = 0.0;
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t t = 0; t < T; ++t) {
                               const auto i = (b * C + c) * T + t;
                               sg += g[i];
                               sgx += g[i] * (*xhat)[i];
                             }
                           gg[c] = sgx;
                           gbeta[c] = sg;
                           if (gx.empty()) continue;
                           const double is = (*inv_std)[c];
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t t = 0; t < T; ++t) {
                               const auto i = (b * C + c) * T + t;
                               if (train) {
                                 gx[i] = gd[c] * is *
                                         (g[i] - sg / static_cast<double>(N) - (*xhat)[i] * sgx / static_cast<double>(N));
                               } else {
                                 gx[i] = gd[c] * is * g[i];
                               }
                             }
                         }
                         if (!gx.empty()) x.accumulate_grad(gx);
                         if (gamma.requires_grad()) gamma.accumulate_grad(gg);
                         if (beta.requires_grad()) beta.accumulate_grad(gbeta);
                       });
  return unbatch(y, squeezed);
}

LayerNorm::LayerNorm(std::size_t features)
    : gamma(Tensor::full({features}, 1.0, true)), beta(Tensor::zeros({features}, true)) {}

LayerNorm::LayerNorm(std::size_t features, ParameterStore &store, const std::string &name) : LayerNorm(features) {
  gamma = store.add_parameter(name + ".gamma", gamma);
  beta = store.add_parameter(name + ".beta", beta);
}

Tensor layer_norm(const Tensor &x, const LayerNorm &state) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d < 2) throw DimensionError("layer_norm: last dimension must be >= 2");
  if (state.gamma.numel() != d || state.beta.numel() != d) {
    throw DimensionError("layer_norm: state sized " + std::to_string(state.gamma.numel()) + ", input last dim " +
                         std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  const double *xd = x.data().data();
  const double *gd = state.gamma.data().data();
  const double *bd = state.beta.data().data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = xd + r * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += xr[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(v + state.epsilon);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - m) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = gd[i] * h + bd[i];
    }
  }
  Tensor gamma = state.gamma, beta = state.beta;
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [=](std::span<const double> g) mutable {
    const double *gd = gamma.data().data();
    std::vector<double> gg(d, 0.0), gb(d, 0.0), gx(x.requires_grad() ? x.numel() : 0);
    std::vector<double> dh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const auto k = r * d + i;
        gg[i] += g[k] * (*xhat)[k];
        gb[i] += g[k];
        dh[i] = g[k] * gd[i];
        s1 += dh[i];
        s2 += dh[i] * (*xhat)[k];
      }
      if (gx.empty()) continue;
      const double is = (*inv_std)[r];
      for (std::size_t i = 0; i < d; ++i) {
        const auto k = r * d + i;
        gx[k] = is * (dh[i] - s1 / static_cast<double>(d) - (*xhat)[k] * s2 / static_cast<double>(d));
      }
    }
    if (!gx.empty()) x.accumulate_grad(gx);
    if (gamma.requires_grad()) gamma.accumulate_grad(gg);
    if (beta.requires_grad()) beta.accumulate_grad(gb);
  });
}

// ---------------------------------------------------------------------------
// Pooling, dropout, linear

Tensor avg_pool1d(const Tensor &x, std::size_t pool) {
  if (pool < 1) throw DimensionError("avg_pool1d: pool must be >= 1");
  if (x.dim() < 1) throw DimensionError("avg_pool1d: scalar input");
  const std::size_t T = x.shape().back();
  const std::size_t To = T / pool;
  if (To == 0) {
    throw DimensionError("avg_pool1d: length " + std::to_string(T) + " shorter than pool " + std::to_string(pool) +
                         " gives empty output");
  }
  const std::size_t rows = x.numel() / T;
  Shape out_shape = x.shape();
  out_shape.back() = To;
  const double *xd = x.data().data();
  const double inv = 1.0 / static_cast<double>(pool);
  std::vector<double> out(rows * To);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < To; ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < pool; ++j) s += xd[r * T + t * pool + j];
      out[r * To + t] = s * inv;
    }
  return make_result(std::move(out_shape), std::move(out), {x}, [=](std::span<const double> g) mutable {
    std::vector<double> gx(x.numel(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t j = 0; j < pool; ++j) gx[r * T + t * pool + j] = g[r * To + t] * inv;
    x.accumulate_grad(gx);
  });
}

Tensor dropout(const Tensor &x, double p, Mode mode, Rng &rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto &m : mask) m = rng.uniform() < p ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias) {
  if (weight.dim() != 2) throw DimensionError("linear: weight must be 2-D, got " + shape_str(weight.shape()));
  if (x.dim() == 0 || x.shape().back() != weight.size(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  Tensor in = x.dim() == 1 ? reshape(x, {1, x.numel()}) : x;
  Tensor y = matmul(in, weight);
  if (bias.defined()) y = add(y, bias);
  return x.dim() == 1 ? reshape(y, {weight.size(1)}) : y;
}

Tensor fan_in_uniform(const Shape &shape, std::size_t fan_in, Rng &rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto &w : v) w = rng.uniform(-s, s);
  return Tensor(shape, std::move(v));
}

Conv1d::Conv1d(const Conv1dSpec &s, ParameterStore &store, const std::string &name, Rng &rng) : spec(s) {
  spec.validate();
  const std::size_t fan_in = (spec.in_channels / spec.groups) * spec.kernel_size;
  weight = store.add_parameter(name + ".weight", fan_in_uniform(spec.weight_shape(), fan_in, rng));
  if (spec.bias) bias = store.add_parameter(name + ".bias", fan_in_uniform({spec.out_channels}, fan_in, rng));
}

Linear::Linear(std::size_t d_in, std::size_t d_out, bool with_bias, ParameterStore &store, const std::string &name,
               Rng &rng) {
  weight = store.add_parameter(name + ".weight", fan_in_uniform({d_in, d_out}, d_in, rng));
  if (with_bias) bias = store.add_parameter(name + ".bias", fan_in_uniform({d_out}, d_in, rng));
}

} // namespace mactn
