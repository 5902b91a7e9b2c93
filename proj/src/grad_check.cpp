#include "mactn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mactn/random.hpp"

namespace mactn {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

namespace {

void record(GradCheckReport &r, const std::string &name, std::size_t index, double analytic, double numeric) {
  const double e = relative_error(analytic, numeric);
  ++r.checked;
  if (e > r.max_rel_error || r.checked == 1) {
    r.max_rel_error = e;
    r.worst_index = index;
    r.worst_tensor = name;
    r.worst_analytic = analytic;
    r.worst_numeric = numeric;
  }
}

} // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor &)> &f, const Tensor &x, double h, double tol,
                           std::uint64_t seed) {
  Tensor probe = x.detach();
  Shape out_shape;
  {
    NoGradGuard ng;
    out_shape = f(probe).shape();
  }
  Rng rng(seed);
  std::vector<double> proj(shape_numel(out_shape));
  for (auto &w : proj) w = rng.uniform(0.5, 1.5);
  const Tensor weights(out_shape, proj);

  auto scalarize = [&](const Tensor &y) { return sum(mul(y, weights)); };

  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  scalarize(f(leaf)).backward();
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  GradCheckReport report;
  NoGradGuard ng;
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = scalarize(f(probe)).item();
    values[i] = orig - h;
    const double fm = scalarize(f(probe)).item();
    values[i] = orig;
    record(report, "x", i, analytic[i], (fp - fm) / (2.0 * h));
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport grad_check_params(const std::function<Tensor()> &loss, std::vector<NamedTensor> params, double h,
                                  double tol, std::size_t max_per_tensor, std::uint64_t seed) {
  for (auto &p : params) p.tensor.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto &p : params) {
    if (p.tensor.has_grad()) {
      analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    } else {
      analytic.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  Rng rng(seed);
  GradCheckReport report;
  NoGradGuard ng;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto &p = params[k];
    std::vector<std::size_t> coords(p.tensor.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_per_tensor > 0 && coords.size() > max_per_tensor) {
      rng.shuffle(coords);
      coords.resize(max_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = p.tensor.mutable_data();
    for (auto i : coords) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = loss().item();
      values[i] = orig - h;
      const double fm = loss().item();
      values[i] = orig;
      record(report, p.name, i, analytic[k][i], (fp - fm) / (2.0 * h));
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

} // namespace mactn
