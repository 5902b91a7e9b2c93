#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mactn/tensor.hpp"

namespace mactn {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One update of a single array at step t (1-based). Weight decay is applied
// to theta directly, outside the moment estimates.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, const AdamWConfig &config);

// Advances state.step and updates every parameter from its accumulated
// gradient. Parameters without a gradient are treated as having zero grad.
// Moment buffers are allocated on first use.
void adamw_step(const std::vector<Tensor> &params, AdamWState &state, const AdamWConfig &config);

// Multiplies the learning rate by `factor` after `patience` consecutive
// epochs without an improvement of at least `min_delta` over the best loss.
struct PlateauScheduler {
  double factor = 0.1;
  std::size_t patience = 10;
  double min_delta = 1e-4;
  double best = 0.0;
  bool has_best = false;
  std::size_t bad_epochs = 0;

  // Returns the learning rate to use from now on.
  double step(double loss, double lr);
};

struct EarlyStopping {
  std::size_t patience = 15;
  double min_delta = 1e-4;
  double best = 0.0;
  bool has_best = false;
  std::size_t bad_epochs = 0;

  // True when the loss improved on the best so far (caller snapshots weights).
  bool improved(double loss);
  bool should_stop() const { return bad_epochs >= patience; }
};

} // namespace mactn
