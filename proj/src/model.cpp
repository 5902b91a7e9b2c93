#include "mactn/model.hpp"

#include <algorithm>
#include <cmath>

namespace mactn {

namespace {

void require(bool ok, const std::string &msg) {
  if (!ok) throw ConfigError("model config: " + msg);
}

Shape per_sample(const Tensor &t) { return Shape(t.shape().begin() + 1, t.shape().end()); }

void record(ForwardTrace *trace, std::string step, std::string name, const Tensor &t) {
  if (trace) trace->steps.push_back({std::move(step), std::move(name), per_sample(t)});
}

Conv1dSpec depthwise_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t pad, bool bias) {
  Conv1dSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_size = k;
  s.groups = in;
  s.padding = pad;
  s.bias = bias;
  return s;
}

Tensor normal_init(const Shape &shape, Rng &rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto &x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

} // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::thu_ep() { return ModelConfig{}; }

ModelConfig ModelConfig::deap() {
  ModelConfig c;
  c.n_channels = 28;
  c.input_len = 1536;
  c.n_classes = 2;
  return c;
}

ModelConfig ModelConfig::miniature(std::size_t n_channels, std::size_t input_len, std::size_t n_classes) {
  ModelConfig c;
  c.n_channels = n_channels;
  c.input_len = input_len;
  c.n_classes = n_classes;
  c.channel_multiplier = 2;
  c.sk_kernel_sizes = {1, 3};
  c.sk_min_dim = 4;
  c.n_encoder_layers = 1;
  c.n_heads = 2;
  c.head_dim = 8;
  c.mlp_dim = 16;
  c.dropout = 0.2;
  return c;
}

std::size_t ModelConfig::feature_channels() const {
  return (use_ltfe && use_depth_block) ? n_channels * channel_multiplier : n_channels;
}

std::size_t ModelConfig::depth_block_len() const {
  if (!(use_ltfe && use_depth_block)) return input_len;
  const std::size_t shrink = 2 * (conv_kernel - 1);
  return input_len > shrink ? input_len - shrink : 0;
}

std::size_t ModelConfig::seq_len() const {
  if (!use_ltfe) return input_len;
  if (pool1 == 0 || pool2 == 0) return 0;
  return depth_block_len() / pool1 / pool2;
}

std::size_t ModelConfig::sk_dim() const {
  return std::max(feature_channels() / std::max<std::size_t>(sk_reduction, 1), sk_min_dim);
}

void ModelConfig::validate() const {
  require(n_channels > 0 && input_len > 0, "n_channels and input_len must be positive");
  require(channel_multiplier > 0, "channel_multiplier must be positive");
  require(conv_kernel > 0 && conv_kernel % 2 == 1, "conv_kernel must be odd and positive");
  require(pool1 > 0 && pool2 > 0, "pool sizes must be positive");
  require(n_classes >= 2, "n_classes must be at least 2");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(depth_block_len() > 0, "input_len too short for the depth conv-block");
  require(seq_len() > 0, "input_len too short: no tokens left after pooling");
  if (use_ltfe && use_sk_attention) {
    require(sk_kernel_sizes.size() >= 2, "SK attention needs at least two kernel sizes");
    for (auto k : sk_kernel_sizes) require(k > 0 && k % 2 == 1, "SK kernel sizes must be odd");
    require(sk_reduction > 0 && sk_dim() > 0, "SK reduction and min dim must give d > 0");
  }
  if (use_gtfe) {
    require(n_encoder_layers > 0, "n_encoder_layers must be positive");
    require(n_heads > 0 && head_dim > 0 && mlp_dim > 0, "transformer widths must be positive");
    require(feature_channels() >= 2, "layer norm needs an embedding width of at least 2");
  }
}

// ---------------------------------------------------------------------------
// Blocks

DepthConvBlock::DepthConvBlock(std::size_t in_channels, std::size_t multiplier, std::size_t kernel,
                               ParameterStore &store, const std::string &name, Rng &rng)
    : conv1(depthwise_spec(in_channels, in_channels * multiplier, kernel, 0, true), store, name + ".conv1", rng),
      conv2(depthwise_spec(in_channels * multiplier, in_channels * multiplier, kernel, 0, false), store,
            name + ".conv2", rng),
      bn(in_channels * multiplier, store, name + ".bn") {}

Tensor DepthConvBlock::forward(const Tensor &x, Mode mode, double p, Rng &dropout_rng, ForwardTrace *trace,
                               const std::string &step1, const std::string &step2) {
  auto h = conv1.forward(x);
  record(trace, step1, "depthwise conv", h);
  h = conv2.forward(h);
  h = dropout(relu(batch_norm1d(h, bn, mode)), p, mode, dropout_rng);
  record(trace, step2, "depthwise conv + BN/ReLU/dropout", h);
  return h;
}

SeparableConv::SeparableConv(std::size_t channels, std::size_t kernel, bool point_bias, ParameterStore &store,
                             const std::string &name, Rng &rng)
    : depth(depthwise_spec(channels, channels, kernel, (kernel - 1) / 2, true), store, name + ".depth", rng),
      point(
          [&] {
            Conv1dSpec s;
            s.in_channels = channels;
            s.out_channels = channels;
            s.bias = point_bias;
            return s;
          }(),
          store, name + ".point", rng) {}

Tensor SeparableConv::forward(const Tensor &x) const { return point.forward(depth.forward(x)); }

SeparableConvBlock::SeparableConvBlock(std::size_t channels, std::size_t kernel, ParameterStore &store,
                                       const std::string &name, Rng &rng)
    : first(channels, kernel, true, store, name + ".sconv1", rng),
      second(channels, kernel, false, store, name + ".sconv2", rng), bn(channels, store, name + ".bn") {}

Tensor SeparableConvBlock::forward(const Tensor &x, Mode mode, double p, Rng &dropout_rng, ForwardTrace *trace,
                                   const std::string &step1, const std::string &step2) {
  auto h = first.forward(x);
  record(trace, step1, "separable conv", h);
  h = second.forward(h);
  h = dropout(relu(batch_norm1d(h, bn, mode)), p, mode, dropout_rng);
  record(trace, step2, "separable conv + BN/ReLU/dropout", h);
  return h;
}

SkAttention::SkAttention(std::size_t channels, const std::vector<std::size_t> &kernel_sizes, std::size_t dim,
                         ParameterStore &store, const std::string &name, Rng &rng) {
  if (kernel_sizes.size() < 2) throw ConfigError("SK attention needs at least two kernel sizes");
  for (std::size_t i = 0; i < kernel_sizes.size(); ++i) {
    const auto k = kernel_sizes[i];
    if (k == 0 || k % 2 == 0)
      throw ConfigError("SK kernel size " + std::to_string(k) + " is even; symmetric padding impossible");
    const auto prefix = name + ".branch" + std::to_string(i);
    branches.push_back({Conv1d(depthwise_spec(channels, channels, k, (k - 1) / 2, false), store, prefix + ".conv", rng),
                        BatchNorm1d(channels, store, prefix + ".bn")});
  }
  fuse = Linear(channels, dim, false, store, name + ".fuse", rng);
  for (std::size_t i = 0; i < kernel_sizes.size(); ++i)
    select.emplace_back(dim, channels, false, store, name + ".select" + std::to_string(i), rng);
}

SkOutput SkAttention::forward(const Tensor &x, Mode mode) {
  if (x.dim() != 3) throw DimensionError("sk_attention: expected [B, C, T], got " + shape_str(x.shape()));
  const std::size_t B = x.size(0), C = x.size(1);
  std::vector<Tensor> streams;
  for (auto &br : branches) streams.push_back(relu(batch_norm1d(br.conv.forward(x), br.bn, mode)));

  Tensor u = streams[0];
  for (std::size_t i = 1; i < streams.size(); ++i) u = add(u, streams[i]);
  const auto s = reduce_mean(u, 2); // [B, C]
  const auto z = fuse.forward(s);   // [B, d]

  std::vector<Tensor> logits;
  for (auto &sel : select) logits.push_back(reshape(sel.forward(z), {B, 1, C}));
  const auto a = softmax(concat(logits, 1), 1); // [B, n, C]

  SkOutput out;
  Tensor v;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const auto ai = slice(a, 1, i, 1);
    out.weights.push_back(reshape(ai, {B, C}));
    const auto term = mul(streams[i], reshape(ai, {B, C, 1}));
    v = v.defined() ? add(v, term) : term;
  }
  out.value = v;
  return out;
}

MhsaOutput mhsa(const Tensor &x, const AttentionParams &params, std::size_t n_heads, std::size_t head_dim) {
  if (x.dim() != 3) throw DimensionError("mhsa: expected [B, S, E], got " + shape_str(x.shape()));
  const std::size_t B = x.size(0), S = x.size(1), E = x.size(2), inner = n_heads * head_dim;
  const Shape proj{E, inner};
  if (params.wq.shape() != proj || params.wk.shape() != proj || params.wv.shape() != proj ||
      params.wo.shape() != Shape{inner, E})
    throw DimensionError("mhsa: projection shapes do not match embedding width " + std::to_string(E) + " and " +
                         std::to_string(n_heads) + "x" + std::to_string(head_dim) + " heads");

  auto split_heads = [&](const Tensor &t) { return permute(reshape(t, {B, S, n_heads, head_dim}), {0, 2, 1, 3}); };
  const auto q = split_heads(matmul(x, params.wq));
  const auto k = split_heads(matmul(x, params.wk));
  const auto v = split_heads(matmul(x, params.wv));

  const auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const auto attn = softmax(scores, 3); // [B, h, S, S]
  const auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, S, inner});
  return {matmul(ctx, params.wo), attn};
}

EncoderLayer::EncoderLayer(std::size_t d_embed, std::size_t heads, std::size_t hdim, std::size_t mlp_dim,
                           ParameterStore &store, const std::string &name, Rng &rng)
    : ln1(d_embed, store, name + ".ln1"), ln2(d_embed, store, name + ".ln2"), n_heads(heads), head_dim(hdim) {
  const std::size_t inner = heads * hdim;
  attn.wq = store.add_parameter(name + ".attn.wq", fan_in_uniform({d_embed, inner}, d_embed, rng));
  attn.wk = store.add_parameter(name + ".attn.wk", fan_in_uniform({d_embed, inner}, d_embed, rng));
  attn.wv = store.add_parameter(name + ".attn.wv", fan_in_uniform({d_embed, inner}, d_embed, rng));
  attn.wo = store.add_parameter(name + ".attn.wo", fan_in_uniform({inner, d_embed}, inner, rng));
  mlp1 = Linear(d_embed, mlp_dim, true, store, name + ".mlp1", rng);
  mlp2 = Linear(mlp_dim, d_embed, true, store, name + ".mlp2", rng);
}

Tensor EncoderLayer::forward(const Tensor &x, Tensor *attention_out) const {
  auto a = mhsa(layer_norm(x, ln1), attn, n_heads, head_dim);
  if (attention_out) *attention_out = a.attention;
  const auto sa = add(a.value, x);
  return add(mlp2.forward(relu(mlp1.forward(layer_norm(sa, ln2)))), sa);
}

// ---------------------------------------------------------------------------
// Model

MactnModel::MactnModel(const ModelConfig &config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(seed);
  const auto &c = config_;
  const std::size_t E = c.feature_channels();
  const std::size_t S = c.seq_len();

  if (c.use_ltfe) {
    if (c.use_depth_block) depth_.emplace(c.n_channels, c.channel_multiplier, c.conv_kernel, store_, "depth", rng);
    if (c.use_sconv_block)
      for (std::size_t i = 0; i < c.n_sconv_blocks; ++i)
        sconv_.emplace_back(E, c.conv_kernel, store_, "sconv" + std::to_string(i), rng);
    if (c.use_sk_attention) sk_.emplace(E, c.sk_kernel_sizes, c.sk_dim(), store_, "sk", rng);
  }
  if (c.use_gtfe) {
    class_token_ = store_.add_parameter("class_token", normal_init({1, E}, rng));
    position_ = store_.add_parameter("position", normal_init({S + 1, E}, rng));
    for (std::size_t i = 0; i < c.n_encoder_layers; ++i)
      encoders_.emplace_back(E, c.n_heads, c.head_dim, c.mlp_dim, store_, "encoder" + std::to_string(i), rng);
    head_ = Linear(E, c.n_classes, true, store_, "head", rng);
  } else {
    head_ = Linear(E * S, c.n_classes, true, store_, "head", rng);
  }
  dropout_rng_ = rng.fork();
}

ForwardResult MactnModel::forward(const Tensor &input, Mode mode, bool trace_on) {
  const auto &c = config_;
  Tensor x = input;
  if (x.dim() == 2) x = reshape(x, {1, x.size(0), x.size(1)});
  if (x.dim() != 3 || x.size(1) != c.n_channels || x.size(2) != c.input_len)
    throw DimensionError("model: expected input [B, " + std::to_string(c.n_channels) + ", " +
                         std::to_string(c.input_len) + "], got " + shape_str(input.shape()));

  ForwardResult result;
  ForwardTrace *trace = trace_on ? &result.trace : nullptr;
  const std::size_t B = x.size(0);
  const double p = c.dropout;
  int step = 1;
  auto next = [&] { return std::to_string(step++); };

  record(trace, next(), "input", x);
  Tensor h = x; // [B, channels, time]
  if (c.use_ltfe) {
    if (depth_) {
      const auto s1 = next(), s2 = next();
      h = depth_->forward(h, mode, p, dropout_rng_, trace, s1, s2);
    }
    h = avg_pool1d(h, c.pool1);
    record(trace, next(), "average pool", h);
    for (auto &blk : sconv_) {
      const auto s1 = next(), s2 = next();
      h = blk.forward(h, mode, p, dropout_rng_, trace, s1, s2);
    }
    h = avg_pool1d(h, c.pool2);
    record(trace, next(), "average pool", h);
    if (sk_) {
      auto sk = sk_->forward(h, mode);
      h = sk.value;
      record(trace, next(), "SK attention", h);
      if (trace)
        for (auto &w : sk.weights) trace->sk_weights.push_back(w.detach());
    }
  }
  if (trace) trace->post_ltfe = h.detach();

  if (!c.use_gtfe) {
    auto logits = head_.forward(reshape(h, {B, h.size(1) * h.size(2)}));
    record(trace, next(), "FC", logits);
    result.logits = logits;
    return result;
  }

  const std::size_t E = h.size(1);
  auto tokens = transpose(h); // [B, S, E]
  record(trace, next(), "reshape", tokens);
  const auto cls = add(Tensor::zeros({B, 1, E}), class_token_);
  record(trace, next(), "class token", cls);
  auto z = add(concat({cls, tokens}, 1), position_);
  record(trace, next(), "concatenate + position encoding", z);
  for (auto &layer : encoders_) {
    Tensor attn;
    z = layer.forward(z, trace ? &attn : nullptr);
    record(trace, next(), "transformer encoder", z);
    if (trace) trace->attention.push_back(attn.detach());
  }
  const auto cls_out = reshape(slice(z, 1, 0, 1), {B, E});
  record(trace, next(), "extract class token", cls_out);
  if (trace) trace->post_gtfe = cls_out.detach();
  result.logits = head_.forward(cls_out);
  record(trace, next(), "FC", result.logits);
  return result;
}

// ---------------------------------------------------------------------------
// FLOPs

FlopCount count_flops(const ModelConfig &c) {
  c.validate();
  using u64 = std::uint64_t;
  const u64 E = c.feature_channels(), P = c.conv_kernel, S = c.seq_len();
  FlopCount f;
  u64 conv = 0, lin = 0, att = 0;
  if (c.use_ltfe) {
    u64 t = c.input_len;
    if (c.use_depth_block) {
      t -= P - 1;
      conv += E * 1 * P * t; // groups = M, one input channel per group
      t -= P - 1;
      conv += E * 1 * P * t;
    }
    const u64 t1 = t / c.pool1;
    if (c.use_sconv_block) conv += c.n_sconv_blocks * 2 * (E * P * t1 + E * E * t1);
    if (c.use_sk_attention) {
      for (auto k : c.sk_kernel_sizes) conv += E * k * S;
      const u64 d = c.sk_dim();
      lin += E * d + c.sk_kernel_sizes.size() * d * E;
    }
  }
  if (c.use_gtfe) {
    const u64 N = S + 1, inner = c.n_heads * c.head_dim;
    for (std::size_t l = 0; l < c.n_encoder_layers; ++l) {
      lin += 3 * N * E * inner + N * inner * E + 2 * N * E * c.mlp_dim;
      att += 2 * c.n_heads * N * N * c.head_dim;
    }
    lin += E * c.n_classes;
  } else {
    lin += E * S * c.n_classes;
  }
  f.conv = 2 * conv;
  f.linear = 2 * lin;
  f.attention = 2 * att;
  return f;
}

} // namespace mactn
