#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mactn/random.hpp"
#include "mactn/tensor.hpp"

namespace mactn {

enum class Mode { Train, Eval };

// Named learnable arrays plus non-learnable buffers (batch-norm running
// statistics), both in insertion order.
class ParameterStore {
public:
  Tensor add_parameter(const std::string &name, Tensor value);
  Tensor add_buffer(const std::string &name, Tensor value);

  const std::vector<std::pair<std::string, Tensor>> &parameters() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>> &buffers() const { return buffers_; }

  bool contains(const std::string &name) const { return index_.count(name) > 0; }
  Tensor get(const std::string &name) const;

  std::size_t parameter_count() const;
  void zero_grad();

  // Values of every parameter then every buffer, in order.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>> &values);

private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::map<std::string, std::pair<bool, std::size_t>> index_; // name -> (is_buffer, slot)
};

struct Conv1dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_size = 1;
  std::size_t groups = 1;
  std::size_t padding = 0;
  bool bias = false;

  void validate() const;
  // Throws when the result would be empty.
  std::size_t output_length(std::size_t input_length) const;
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_size}; }
};

// Grouped 1-D cross-correlation with symmetric zero padding.
// x: [B, C_in, T] or [C_in, T]; weight: [C_out, C_in/groups, k]; bias: [C_out] or undefined.
Tensor conv1d(const Tensor &x, const Tensor &weight, const Tensor &bias, const Conv1dSpec &spec);

// conv1d restricted to groups == in_channels (each output depends on one input channel).
Tensor depthwise_conv1d(const Tensor &x, const Tensor &weight, const Conv1dSpec &spec, const Tensor &bias = {});
Tensor pointwise_conv1d(const Tensor &x, const Tensor &weight, const Conv1dSpec &spec, const Tensor &bias = {});
Tensor separable_conv1d(const Tensor &x, const Tensor &depth_weight, const Conv1dSpec &depth_spec,
                        const Tensor &point_weight, const Conv1dSpec &point_spec);

struct BatchNorm1d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  explicit BatchNorm1d(std::size_t features = 1);
  BatchNorm1d(std::size_t features, ParameterStore &store, const std::string &name);
};

// x: [B, C, T] or [C, T]. Train mode normalizes with batch statistics over
// batch and time and updates the running statistics.
Tensor batch_norm1d(const Tensor &x, BatchNorm1d &state, Mode mode);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double epsilon = 1e-5;

  explicit LayerNorm(std::size_t features = 2);
  LayerNorm(std::size_t features, ParameterStore &store, const std::string &name);
};

Tensor layer_norm(const Tensor &x, const LayerNorm &state);

// Non-overlapping window means over the last axis; trailing samples that do
// not fill a window are dropped.
Tensor avg_pool1d(const Tensor &x, std::size_t pool);

Tensor dropout(const Tensor &x, double p, Mode mode, Rng &rng);

// x[..., d_in] * weight[d_in, d_out] + bias[d_out]; bias may be undefined.
Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias = {});

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(const Shape &shape, std::size_t fan_in, Rng &rng);

struct Conv1d {
  Conv1dSpec spec;
  Tensor weight;
  Tensor bias;

  Conv1d() = default;
  Conv1d(const Conv1dSpec &spec, ParameterStore &store, const std::string &name, Rng &rng);
  Tensor forward(const Tensor &x) const { return conv1d(x, weight, bias, spec); }
};

struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t d_in, std::size_t d_out, bool with_bias, ParameterStore &store, const std::string &name,
         Rng &rng);
  Tensor forward(const Tensor &x) const { return linear(x, weight, bias); }
};

} // namespace mactn
