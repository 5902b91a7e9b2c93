#pragma once

#include <span>
#include <string>
#include <vector>

#include "mactn/model.hpp"
#include "mactn/train.hpp"

namespace mactn {

// ---------------------------------------------------------------------------
// Composed kernels

// Taps of the single correlation equivalent to correlating with k1 then k2
// (their full discrete convolution, length k1 + k2 - 1).
std::vector<double> compose_kernels(std::span<const double> k1, std::span<const double> k2);

struct ComposedKernelSet {
  std::string first, second; // layer names, applied in this order
  bool exact = true;         // false when BN/ReLU sit between the two layers
  std::size_t length = 0;
  double window_s = 0;                    // length / sample_rate
  std::vector<std::size_t> source_channel; // EEG channel feeding each feature channel
  std::vector<std::vector<double>> taps;  // one kernel per feature channel
};

// Depthwise layers in forward order: depth.conv1, depth.conv2,
// sconv<i>.sconv1.depth, sconv<i>.sconv2.depth.
std::vector<std::string> depthwise_layers(const MactnModel &model);

// Composes two depthwise layers of a model. Throws ContractError when the
// layers are not in order or a channel-mixing layer lies between them.
ComposedKernelSet compose_layers(const MactnModel &model, const std::string &first, const std::string &second,
                                 double sample_rate);

// ---------------------------------------------------------------------------
// Channel attention

struct ChannelAttention {
  std::vector<std::size_t> kernel_sizes;          // one per stream
  std::size_t n_samples = 0;
  std::size_t group = 0;                          // feature channels per EEG channel (C1)
  std::vector<std::vector<double>> feature;       // streams x K2, averaged over samples
  std::vector<std::vector<double>> channel;       // streams x M, group means of `feature`
  std::vector<std::vector<double>> normalized;    // streams x M, min-max onto [-1, 1]
  std::vector<std::string> channel_names;
};

// Min-max onto [lo, hi]; a constant vector maps to the midpoint.
std::vector<double> min_max(std::span<const double> v, double lo, double hi);

ChannelAttention extract_channel_attention(MactnModel &model, const Dataset &data,
                                           std::span<const std::size_t> indices,
                                           std::vector<std::string> channel_names = {});

// ---------------------------------------------------------------------------
// Self-attention traces

struct SelfAttentionTrace {
  std::vector<std::vector<double>> per_layer; // class-token row, head-averaged, self-entry dropped
  std::vector<double> row_sums;               // per layer, before dropping the self-entry
  std::vector<double> raw;                    // mean over layers
  std::vector<double> normalized;             // min-max onto [0, 1]
  double seconds_per_token = 0;
};

// segment: [M, T]. sample_rate converts tokens to seconds.
SelfAttentionTrace extract_self_attention(MactnModel &model, const Tensor &segment, double sample_rate);

// ---------------------------------------------------------------------------
// Feature export

enum class FeatureStage { PostLtfe, PostGtfe };
std::string to_string(FeatureStage stage);
FeatureStage feature_stage_from_string(const std::string &name); // throws ConfigError

struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::size_t width = 0;
  std::vector<double> values; // rows x width
};

FeatureTable export_features(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                             FeatureStage stage, std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Files, named explain_<kind>_<id>.<ext>

std::string explain_filename(const std::string &kind, const std::string &id, const std::string &ext);

void write_feature_csv(const FeatureTable &table, const std::string &path);
void write_kernels_csv(const ComposedKernelSet &set, const std::string &path);
void write_channel_attention_csv(const ChannelAttention &att, const std::string &path);
void write_self_attention_csv(const SelfAttentionTrace &trace, const std::string &path);
void write_channel_attention_svg(const ChannelAttention &att, const std::string &path);
void write_self_attention_svg(const SelfAttentionTrace &trace, const std::string &path);

} // namespace mactn
