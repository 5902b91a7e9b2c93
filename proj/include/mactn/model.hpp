#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mactn/layers.hpp"

namespace mactn {

// Architecture hyperparameters. Defaults reproduce the 30-channel, 14 s,
// 9-class configuration.
struct ModelConfig {
  std::size_t n_channels = 30;       // EEG channels entering the model
  std::size_t input_len = 1750;      // samples per segment
  std::size_t channel_multiplier = 4; // feature maps per EEG channel in the first depthwise conv
  std::size_t conv_kernel = 15;
  std::size_t n_sconv_blocks = 2;
  std::size_t pool1 = 4;
  std::size_t pool2 = 5;
  std::vector<std::size_t> sk_kernel_sizes{1, 3, 5, 7};
  std::size_t sk_reduction = 4;
  std::size_t sk_min_dim = 32;
  std::size_t n_encoder_layers = 6;
  std::size_t n_heads = 8;
  std::size_t head_dim = 256;
  std::size_t mlp_dim = 128;
  std::size_t n_classes = 9;
  double dropout = 0.5;

  // Ablation switches. use_ltfe=false bypasses the whole convolutional
  // front end (including pooling) and feeds raw samples as tokens.
  bool use_ltfe = true;
  bool use_depth_block = true;
  bool use_sconv_block = true;
  bool use_sk_attention = true;
  bool use_gtfe = true;

  static ModelConfig thu_ep();
  static ModelConfig deap();
  // Small configuration for desk-scale tests and synthetic experiments.
  static ModelConfig miniature(std::size_t n_channels = 4, std::size_t input_len = 128, std::size_t n_classes = 3);

  void validate() const;
  // Feature channels entering the transformer (d_embed).
  std::size_t feature_channels() const;
  // Time length right after the depth conv-block (or the raw length without it).
  std::size_t depth_block_len() const;
  // Number of time tokens (d_seq), excluding the class token.
  std::size_t seq_len() const;
  // Bottleneck width of the SK fuse layer.
  std::size_t sk_dim() const;
};

struct StepShape {
  std::string step;  // e.g. "2", "14-19/3"
  std::string name;
  Shape shape;       // per sample, batch axis removed
};

struct ForwardTrace {
  std::vector<StepShape> steps;
  std::vector<Tensor> sk_weights; // per stream: [B, K2]
  std::vector<Tensor> attention;  // per encoder layer: [B, h, S+1, S+1]
  Tensor post_ltfe;               // [B, K2, d_seq]
  Tensor post_gtfe;               // [B, d_embed] class-token state
};

struct ForwardResult {
  Tensor logits; // [B, n_classes]
  ForwardTrace trace;
};

// Depth conv-block: two depthwise convs (M -> M*C1 -> M*C1, no padding)
// followed by BN, ReLU, dropout.
struct DepthConvBlock {
  Conv1d conv1;
  Conv1d conv2;
  BatchNorm1d bn;

  DepthConvBlock(std::size_t in_channels, std::size_t multiplier, std::size_t kernel, ParameterStore &store,
                 const std::string &name, Rng &rng);
  Tensor forward(const Tensor &x, Mode mode, double p, Rng &dropout_rng, ForwardTrace *trace,
                 const std::string &step1, const std::string &step2);
};

// Depthwise conv with length-preserving padding then pointwise channel mix.
struct SeparableConv {
  Conv1d depth;
  Conv1d point;

  SeparableConv(std::size_t channels, std::size_t kernel, bool point_bias, ParameterStore &store,
                const std::string &name, Rng &rng);
  Tensor forward(const Tensor &x) const;
};

// Two separable convs then BN, ReLU, dropout.
struct SeparableConvBlock {
  SeparableConv first;
  SeparableConv second;
  BatchNorm1d bn;

  SeparableConvBlock(std::size_t channels, std::size_t kernel, ParameterStore &store, const std::string &name,
                     Rng &rng);
  Tensor forward(const Tensor &x, Mode mode, double p, Rng &dropout_rng, ForwardTrace *trace,
                 const std::string &step1, const std::string &step2);
};

struct SkOutput {
  Tensor value;                 // [B, K2, T']
  std::vector<Tensor> weights;  // per stream: [B, K2], softmax across streams
};

// Selective-kernel channel attention over n >= 2 streams.
struct SkAttention {
  struct Branch {
    Conv1d conv;
    BatchNorm1d bn;
  };
  std::vector<Branch> branches;
  Linear fuse;                 // K2 -> d, no bias
  std::vector<Linear> select;  // per stream: d -> K2, no bias

  SkAttention(std::size_t channels, const std::vector<std::size_t> &kernel_sizes, std::size_t dim,
              ParameterStore &store, const std::string &name, Rng &rng);
  SkOutput forward(const Tensor &x, Mode mode);
};

struct AttentionParams {
  Tensor wq, wk, wv; // [d_embed, h*d_k]
  Tensor wo;         // [h*d_k, d_embed]
};

struct MhsaOutput {
  Tensor value;     // [B, S, d_embed]
  Tensor attention; // [B, h, S, S]
};

MhsaOutput mhsa(const Tensor &x, const AttentionParams &params, std::size_t n_heads, std::size_t head_dim);

// Pre-LN encoder layer with residuals after attention and after the MLP.
struct EncoderLayer {
  LayerNorm ln1;
  AttentionParams attn;
  LayerNorm ln2;
  Linear mlp1;
  Linear mlp2;
  std::size_t n_heads;
  std::size_t head_dim;

  EncoderLayer(std::size_t d_embed, std::size_t n_heads, std::size_t head_dim, std::size_t mlp_dim,
               ParameterStore &store, const std::string &name, Rng &rng);
  Tensor forward(const Tensor &x, Tensor *attention_out) const;
};

class MactnModel {
public:
  MactnModel(const ModelConfig &config, std::uint64_t seed);
  MactnModel(const MactnModel &) = delete;
  MactnModel &operator=(const MactnModel &) = delete;

  // x: [B, M, T] or [M, T].
  ForwardResult forward(const Tensor &x, Mode mode, bool trace = false);

  const ModelConfig &config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore &parameters() { return store_; }
  const ParameterStore &parameters() const { return store_; }
  Rng &dropout_rng() { return dropout_rng_; }

  // Depthwise kernels of the first two convolutions (for kernel composition).
  const DepthConvBlock *depth_block() const { return depth_ ? &*depth_ : nullptr; }
  std::vector<EncoderLayer> &encoder_layers() { return encoders_; }
  SkAttention *sk_attention() { return sk_ ? &*sk_ : nullptr; }

private:
  ModelConfig config_;
  std::uint64_t seed_;
  ParameterStore store_;
  Rng dropout_rng_;
  std::optional<DepthConvBlock> depth_;
  std::vector<SeparableConvBlock> sconv_;
  std::optional<SkAttention> sk_;
  Tensor class_token_;
  Tensor position_;
  std::vector<EncoderLayer> encoders_;
  Linear head_;
};

struct FlopCount {
  std::uint64_t conv = 0;
  std::uint64_t linear = 0;
  std::uint64_t attention = 0; // QK^T and AV products
  std::uint64_t total() const { return conv + linear + attention; }
};

// Closed-form per-sample FLOPs (2 per multiply-accumulate) of convolutions,
// linear maps and attention products.
FlopCount count_flops(const ModelConfig &config);

} // namespace mactn
