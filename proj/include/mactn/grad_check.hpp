#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mactn/tensor.hpp"

namespace mactn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;      // flat index into the checked tensor
  std::string worst_tensor;          // name, for multi-tensor checks
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
// turning rounding noise into large ratios.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares autodiff against central differences for f at x. Non-scalar
// outputs are reduced to a scalar by a fixed pseudo-random projection.
GradCheckReport grad_check(const std::function<Tensor(const Tensor &)> &f, const Tensor &x, double h = 1e-5,
                           double tol = 1e-4, std::uint64_t seed = 1234);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Same comparison for a scalar loss against a set of leaf tensors, perturbed
// in place. At most `max_per_tensor` coordinates are probed per tensor
// (chosen deterministically); 0 means all.
GradCheckReport grad_check_params(const std::function<Tensor()> &loss, std::vector<NamedTensor> params,
                                  double h = 1e-5, double tol = 1e-4, std::size_t max_per_tensor = 0,
                                  std::uint64_t seed = 1234);

} // namespace mactn
