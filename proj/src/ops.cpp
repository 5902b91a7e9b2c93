#include <algorithm>
#include <cmath>
#include <numeric>

#include "mactn/tensor.hpp"

namespace mactn {

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape &shape, std::size_t axis, const char *op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// For every flat index of `a`, the flat index of `b` under trailing broadcast.
std::vector<std::size_t> broadcast_map(const Shape &a, const Shape &b, const char *op) {
  const auto na = shape_numel(a);
  std::vector<std::size_t> map(na, 0);
  if (shape_numel(b) == 1) return map;
  if (b.size() > a.size()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  }
  const std::size_t offset = a.size() - b.size();
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    const auto ad = a[offset + i];
    if (b[i] != ad && b[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    }
    bstride[offset + i] = b[i] == 1 ? 0 : stride;
    stride *= b[i];
  }
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < na; ++i) {
    map[i] = bi;
    for (std::size_t d = a.size(); d-- > 0;) {
      ++counter[d];
      bi += bstride[d];
      if (counter[d] < a[d]) break;
      bi -= bstride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const Tensor &a, const Tensor &b, Binary kind, const char *name) {
  const auto &as = a.shape();
  const bool same = as == b.shape();
  std::vector<std::size_t> map;
  if (!same) map = broadcast_map(as, b.shape(), name);
  auto bidx = [&](std::size_t i) { return same ? i : map[i]; };

  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ad[i], y = bd[bidx(i)];
    out[i] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
  }
  return make_result(as, std::move(out), {a, b},
                     [a, b, kind, same, map = std::move(map)](std::span<const double> g) mutable {
                       auto bi = [&](std::size_t i) { return same ? i : map[i]; };
                       if (a.requires_grad()) {
                         if (kind == Binary::Mul) {
                           const auto bd = b.data();
                           std::vector<double> ga(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bd[bi(i)];
                           a.accumulate_grad(ga);
                         } else {
                           a.accumulate_grad(g);
                         }
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(b.numel(), 0.0);
                         const auto ad = a.data();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const double v = kind == Binary::Add ? g[i]
                                            : kind == Binary::Sub ? -g[i]
                                                                  : g[i] * ad[i];
                           gb[bi(i)] += v;
                         }
                         b.accumulate_grad(gb);
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor &x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  return make_result(x.shape(), std::move(out), {x}, [x, deriv](std::span<const double> g) mutable {
    const auto xd = x.data();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * deriv(xd[i]);
    x.accumulate_grad(gx);
  });
}

void gemm_acc(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double *ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_abt_acc(const double *g, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double *bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_atb_acc(const double *a, const double *g, double *c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double *cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

} // namespace

Tensor matmul(const Tensor &a, const Tensor &b) {
  const auto &as = a.shape();
  const auto &bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul: operands must be at least 2-D, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  const bool shared_b = bs.size() == 2;
  bool ok = k == k2;
  if (!shared_b) ok = ok && as.size() == bs.size() && std::equal(as.begin(), as.end() - 2, bs.begin());
  if (!ok) throw DimensionError("matmul: shape mismatch " + shape_str(as) + " x " + shape_str(bs));

  const std::size_t batch = shape_numel(as) / (m * k == 0 ? 1 : m * k);
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double *ad = a.data().data();
  const double *bd = b.data().data();
  if (shared_b) {
    // Leading dims fold into rows.
    gemm_acc(ad, bd, out.data(), batch * m, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s) gemm_acc(ad + s * m * k, bd + s * k * n, out.data() + s * m * n, m, k, n);
  }
  add_macs(static_cast<std::uint64_t>(batch) * m * k * n);

  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [a, b, batch, m, k, n, shared_b](std::span<const double> g) mutable {
                       const double *ad = a.data().data();
                       const double *bd = b.data().data();
                       if (a.requires_grad()) {
                         std::vector<double> ga(a.numel(), 0.0);
                         if (shared_b) {
                           gemm_abt_acc(g.data(), bd, ga.data(), batch * m, k, n);
                         } else {
                           for (std::size_t s = 0; s < batch; ++s)
                             gemm_abt_acc(g.data() + s * m * n, bd + s * k * n, ga.data() + s * m * k, m, k, n);
                         }
                         a.accumulate_grad(ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(b.numel(), 0.0);
                         if (shared_b) {
                           gemm_atb_acc(ad, g.data(), gb.data(), batch * m, k, n);
                         } else {
                           for (std::size_t s = 0; s < batch; ++s)
                             gemm_atb_acc(ad + s * m * k, g.data() + s * m * n, gb.data() + s * k * n, m, k, n);
                         }
                         b.accumulate_grad(gb);
                       }
                     });
}

Tensor add(const Tensor &a, const Tensor &b) { return binary(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor &a, const Tensor &b) { return binary(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor &a, const Tensor &b) { return binary(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor &x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor &x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double) { return 1.0; });
}

Tensor relu(const Tensor &x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor &x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor softmax(const Tensor &x, std::size_t axis) {
  const auto sp = split_at(x.shape(), axis, "softmax");
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < sp.len; ++i) mx = std::max(mx, xd[base + i * sp.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const double e = std::exp(xd[base + i * sp.inner] - mx);
        y[base + i * sp.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < sp.len; ++i) y[base + i * sp.inner] /= total;
    }
  }
  auto saved = std::make_shared<std::vector<double>>(y);
  return make_result(x.shape(), std::move(y), {x}, [x, sp, saved](std::span<const double> g) mutable {
    const auto &yv = *saved;
    std::vector<double> gx(g.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < sp.len; ++i) dot += g[base + i * sp.inner] * yv[base + i * sp.inner];
        for (std::size_t i = 0; i < sp.len; ++i) {
          const auto j = base + i * sp.inner;
          gx[j] = yv[j] * (g[j] - dot);
        }
      }
    }
    x.accumulate_grad(gx);
  });
}

Tensor reduce_sum(const Tensor &x, std::size_t axis) {
  const auto sp = split_at(x.shape(), axis, "reduce_sum");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto xd = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.len; ++i)
      for (std::size_t in = 0; in < sp.inner; ++in) out[o * sp.inner + in] += xd[(o * sp.len + i) * sp.inner + in];
  return make_result(std::move(out_shape), std::move(out), {x}, [x, sp](std::span<const double> g) mutable {
    std::vector<double> gx(x.numel());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.len; ++i)
        for (std::size_t in = 0; in < sp.inner; ++in) gx[(o * sp.len + i) * sp.inner + in] = g[o * sp.inner + in];
    x.accumulate_grad(gx);
  });
}

Tensor reduce_mean(const Tensor &x, std::size_t axis) {
  const auto len = split_at(x.shape(), axis, "reduce_mean").len;
  if (len == 0) throw EmptyReductionError("reduce_mean: axis " + std::to_string(axis) + " of " + shape_str(x.shape()) + " is empty");
  return scale(reduce_sum(x, axis), 1.0 / static_cast<double>(len));
}

Tensor sum(const Tensor &x) {
  const auto xd = x.data();
  const double total = std::accumulate(xd.begin(), xd.end(), 0.0);
  return make_result({}, {total}, {x}, [x](std::span<const double> g) mutable {
    std::vector<double> gx(x.numel(), g[0]);
    x.accumulate_grad(gx);
  });
}

Tensor mean(const Tensor &x) {
  if (x.numel() == 0) throw EmptyReductionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor &x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto xd = x.data();
  return make_result(std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x},
                     [x](std::span<const double> g) mutable { x.accumulate_grad(g); });
}

Tensor permute(const Tensor &x, const std::vector<std::size_t> &order) {
  const auto &s = x.shape();
  if (order.size() != s.size()) throw DimensionError("permute: order rank does not match " + shape_str(s));
  std::vector<bool> used(s.size(), false);
  for (auto o : order) {
    if (o >= s.size() || used[o]) throw DimensionError("permute: invalid axis order");
    used[o] = true;
  }
  const std::size_t rank = s.size();
  Shape out_shape(rank);
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * s[d];
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = s[order[d]];
    src_stride[d] = in_stride[order[d]];
  }
  // index[i] = flat source index of output element i
  const std::size_t n = x.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*index)[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      src += src_stride[d];
      if (counter[d] < out_shape[d]) break;
      src -= src_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*index)[i]];
  return make_result(std::move(out_shape), std::move(out), {x}, [x, index](std::span<const double> g) mutable {
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] = g[i];
    x.accumulate_grad(gx);
  });
}

Tensor transpose(const Tensor &x) {
  const auto rank = x.dim();
  if (rank < 2) throw DimensionError("transpose: need rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto &p : parts) {
    const auto &s = p.shape();
    bool ok = s.size() == out_shape.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == out_shape[d];
    if (!ok) throw DimensionError("concat: incompatible " + shape_str(s) + " vs " + shape_str(out_shape));
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto sp = split_at(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto &p : parts) {
    offsets.push_back(off);
    const auto len = p.shape()[axis];
    const auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + off) * sp.inner));
    off += len;
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [parts, offsets, sp, axis, total](std::span<const double> g) mutable {
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         auto &p = parts[k];
                         if (!p.requires_grad()) continue;
                         const auto len = p.shape()[axis];
                         std::vector<double> gp(p.numel());
                         for (std::size_t o = 0; o < sp.outer; ++o)
                           std::copy_n(g.begin() + static_cast<std::ptrdiff_t>((o * total + offsets[k]) * sp.inner),
                                       len * sp.inner, gp.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
                         p.accumulate_grad(gp);
                       }
                     });
}

Tensor slice(const Tensor &x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_at(x.shape(), axis, "slice");
  if (start + length > sp.len) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis of length " + std::to_string(sp.len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto xd = x.data();
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, sp, start, length](std::span<const double> g) mutable {
                       std::vector<double> gx(x.numel(), 0.0);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner), length * sp.inner,
                                     gx.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner));
                       x.accumulate_grad(gx);
                     });
}

} // namespace mactn
