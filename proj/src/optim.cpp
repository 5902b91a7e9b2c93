#include "mactn/optim.hpp"

#include <cmath>

namespace mactn {

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, const AdamWConfig &c) {
  if (t < 1) throw ContractError("adamw: step index must be >= 1");
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size())
    throw DimensionError("adamw: state arrays do not match parameter size");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = m[i] / bc1, vhat = v[i] / bc2;
    theta[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * theta[i]);
  }
}

void adamw_step(const std::vector<Tensor> &params, AdamWState &state, const AdamWConfig &config) {
  if (state.m.empty()) {
    for (auto &p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw: state has a different parameter count");
  ++state.step;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    std::span<const double> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), 0.0);
      g = zeros;
    }
    adamw_update(p.mutable_data(), g, state.m[i], state.v[i], state.step, config);
  }
}

double PlateauScheduler::step(double loss, double lr) {
  if (!has_best || loss < best - min_delta) {
    best = loss;
    has_best = true;
    bad_epochs = 0;
    return lr;
  }
  if (++bad_epochs >= patience) {
    bad_epochs = 0;
    return lr * factor;
  }
  return lr;
}

bool EarlyStopping::improved(double loss) {
  if (!has_best || loss < best - min_delta) {
    best = loss;
    has_best = true;
    bad_epochs = 0;
    return true;
  }
  ++bad_epochs;
  return false;
}

} // namespace mactn
