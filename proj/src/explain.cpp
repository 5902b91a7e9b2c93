#include "mactn/explain.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mactn/data_io.hpp"

namespace mactn {

// ---------------------------------------------------------------------------
// Composed kernels

std::vector<double> compose_kernels(std::span<const double> k1, std::span<const double> k2) {
  if (k1.empty() || k2.empty()) throw DimensionError("compose_kernels: empty kernel");
  std::vector<double> out(k1.size() + k2.size() - 1, 0.0);
  for (std::size_t i = 0; i < k1.size(); ++i)
    for (std::size_t j = 0; j < k2.size(); ++j) out[i + j] += k1[i] * k2[j];
  return out;
}

namespace {

// A depthwise layer and what separates it from the previous one.
struct LayerStep {
  std::string name;
  bool mixing_before;    // a channel-mixing layer lies between this and the previous entry
  bool nonlinear_before; // BN/ReLU lie between this and the previous entry
};

std::vector<LayerStep> layer_steps(const ModelConfig &c) {
  std::vector<LayerStep> steps;
  if (!c.use_ltfe) return steps;
  bool mixing = false, nonlinear = false;
  if (c.use_depth_block) {
    steps.push_back({"depth.conv1", false, false});
    steps.push_back({"depth.conv2", false, false});
    nonlinear = true; // BN, ReLU
  }
  if (c.use_sconv_block)
    for (std::size_t i = 0; i < c.n_sconv_blocks; ++i) {
      const std::string b = "sconv" + std::to_string(i);
      steps.push_back({b + ".sconv1.depth", mixing, nonlinear});
      steps.push_back({b + ".sconv2.depth", true, false});
      mixing = true; // pointwise of sconv2
      nonlinear = true;
    }
  return steps;
}

} // namespace

std::vector<std::string> depthwise_layers(const MactnModel &model) {
  std::vector<std::string> names;
  for (const auto &s : layer_steps(model.config())) names.push_back(s.name);
  return names;
}

ComposedKernelSet compose_layers(const MactnModel &model, const std::string &first, const std::string &second,
                                 double sample_rate) {
  if (!(sample_rate > 0)) throw ConfigError("compose_layers: sample rate must be positive");
  const auto steps = layer_steps(model.config());
  auto find = [&](const std::string &name) {
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (steps[i].name == name) return i;
    throw ContractError("compose_layers: '" + name + "' is not a depthwise layer of this model");
  };
  const std::size_t a = find(first), b = find(second);
  if (b <= a) throw ContractError("compose_layers: '" + second + "' does not follow '" + first + "'");
  ComposedKernelSet out;
  out.first = first;
  out.second = second;
  for (std::size_t i = a + 1; i <= b; ++i) {
    if (steps[i].mixing_before)
      throw ContractError("compose_layers: a channel-mixing layer separates '" + first + "' and '" + second + "'");
    if (steps[i].nonlinear_before) out.exact = false;
  }
  // Chain every depthwise layer from first through second.
  const auto &store = model.parameters();
  const auto &c = model.config();
  Tensor w0 = store.get(first + ".weight");
  const std::size_t channels = w0.size(0);
  out.taps.assign(channels, {});
  for (std::size_t ch = 0; ch < channels; ++ch) out.taps[ch] = {1.0};
  for (std::size_t i = a; i <= b; ++i) {
    Tensor w = store.get(steps[i].name + ".weight");
    if (w.size(0) != channels || w.size(1) != 1)
      throw ContractError("compose_layers: lineage mismatch at '" + steps[i].name + "'");
    const std::size_t k = w.size(2);
    for (std::size_t ch = 0; ch < channels; ++ch)
      out.taps[ch] = compose_kernels(out.taps[ch], w.data().subspan(ch * k, k));
  }
  out.length = out.taps.front().size();
  out.window_s = static_cast<double>(out.length) / sample_rate;
  const std::size_t per_source = std::max<std::size_t>(1, channels / c.n_channels);
  for (std::size_t ch = 0; ch < channels; ++ch) out.source_channel.push_back(ch / per_source);
  return out;
}

// ---------------------------------------------------------------------------
// Channel attention

std::vector<double> min_max(std::span<const double> v, double lo, double hi) {
  if (v.empty()) return {};
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  const double range = *mx - *mn;
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = range > 0 ? lo + (hi - lo) * (v[i] - *mn) / range : 0.5 * (lo + hi);
  return out;
}

ChannelAttention extract_channel_attention(MactnModel &model, const Dataset &data,
                                           std::span<const std::size_t> indices,
                                           std::vector<std::string> channel_names) {
  const auto &c = model.config();
  if (!c.use_ltfe || !c.use_sk_attention) throw ContractError("channel attention: model has no SK attention");
  if (indices.empty()) throw EmptyReductionError("channel attention: empty sample set");
  const std::size_t K2 = c.feature_channels(), M = c.n_channels;
  ChannelAttention out;
  out.kernel_sizes = c.sk_kernel_sizes;
  out.n_samples = indices.size();
  out.group = K2 / M;
  out.feature.assign(c.sk_kernel_sizes.size(), std::vector<double>(K2, 0.0));
  NoGradGuard guard;
  for (std::size_t start = 0; start < indices.size(); start += 64) {
    auto ids = indices.subspan(start, std::min<std::size_t>(64, indices.size() - start));
    auto res = model.forward(data.batch(ids), Mode::Eval, true);
    for (std::size_t s = 0; s < res.trace.sk_weights.size(); ++s) {
      auto w = res.trace.sk_weights[s].data();
      for (std::size_t b = 0; b < ids.size(); ++b)
        for (std::size_t k = 0; k < K2; ++k) out.feature[s][k] += w[b * K2 + k];
    }
  }
  for (auto &row : out.feature)
    for (auto &x : row) x /= static_cast<double>(indices.size());
  for (const auto &row : out.feature) {
    std::vector<double> agg(M, 0.0);
    for (std::size_t k = 0; k < K2; ++k) agg[k / out.group] += row[k] / static_cast<double>(out.group);
    out.normalized.push_back(min_max(agg, -1.0, 1.0));
    out.channel.push_back(std::move(agg));
  }
  if (channel_names.empty())
    for (std::size_t m = 0; m < M; ++m) channel_names.push_back("ch" + std::to_string(m));
  if (channel_names.size() != M) throw DimensionError("channel attention: channel name count differs from M");
  out.channel_names = std::move(channel_names);
  return out;
}

// ---------------------------------------------------------------------------
// Self-attention traces

SelfAttentionTrace extract_self_attention(MactnModel &model, const Tensor &segment, double sample_rate) {
  const auto &c = model.config();
  if (!c.use_gtfe) throw ContractError("self-attention: model has no transformer encoder");
  if (segment.dim() != 2 || segment.size(0) != c.n_channels || segment.size(1) != c.input_len)
    throw DimensionError("self-attention: segment is " + shape_str(segment.shape()) + ", model expects (" +
                         std::to_string(c.n_channels) + ", " + std::to_string(c.input_len) + ")");
  if (!(sample_rate > 0)) throw ConfigError("self-attention: sample rate must be positive");
  NoGradGuard guard;
  auto res = model.forward(segment, Mode::Eval, true);
  SelfAttentionTrace out;
  const std::size_t S = c.seq_len(), H = c.n_heads;
  out.raw.assign(S, 0.0);
  for (const auto &a : res.trace.attention) {
    auto v = a.data(); // [1, H, S+1, S+1]; class-token query is row 0
    std::vector<double> row(S + 1, 0.0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j <= S; ++j) row[j] += v[h * (S + 1) * (S + 1) + j] / static_cast<double>(H);
    double sum = 0;
    for (double x : row) sum += x;
    out.row_sums.push_back(sum);
    out.per_layer.emplace_back(row.begin() + 1, row.end());
    for (std::size_t j = 0; j < S; ++j) out.raw[j] += row[j + 1] / static_cast<double>(res.trace.attention.size());
  }
  out.normalized = min_max(out.raw, 0.0, 1.0);
  out.seconds_per_token = static_cast<double>(c.input_len) / sample_rate / static_cast<double>(S);
  return out;
}

// ---------------------------------------------------------------------------
// Feature export

std::string to_string(FeatureStage stage) { return stage == FeatureStage::PostLtfe ? "post_ltfe" : "post_gtfe"; }

FeatureStage feature_stage_from_string(const std::string &name) {
  if (name == "post_ltfe") return FeatureStage::PostLtfe;
  if (name == "post_gtfe") return FeatureStage::PostGtfe;
  throw ConfigError("unknown feature stage '" + name + "' (expected post_ltfe or post_gtfe)");
}

FeatureTable export_features(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                             FeatureStage stage, std::size_t batch_size) {
  if (stage == FeatureStage::PostGtfe && !model.config().use_gtfe)
    throw ContractError("export_features: model has no transformer encoder");
  if (batch_size == 0) throw ConfigError("export_features: batch_size must be positive");
  FeatureTable t;
  NoGradGuard guard;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    auto ids = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto res = model.forward(data.batch(ids), Mode::Eval, true);
    const Tensor &f = stage == FeatureStage::PostLtfe ? res.trace.post_ltfe : res.trace.post_gtfe;
    t.width = f.numel() / ids.size();
    t.values.insert(t.values.end(), f.data().begin(), f.data().end());
    for (auto i : ids) {
      t.ids.push_back(data.info(i).key());
      t.labels.push_back(data.info(i).label);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Files

std::string explain_filename(const std::string &kind, const std::string &id, const std::string &ext) {
  std::string safe = id;
  for (auto &ch : safe)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
  return "explain_" + kind + "_" + safe + "." + ext;
}

namespace {

std::ofstream open_out(const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError("cannot write '" + path + "'");
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Blue (-1) .. white (0) .. red (+1).
std::string diverging(double v) {
  v = std::clamp(v, -1.0, 1.0);
  const int fade = static_cast<int>(255 * (1 - std::abs(v)));
  char buf[16];
  if (v >= 0) std::snprintf(buf, sizeof buf, "#ff%02x%02x", fade, fade);
  else std::snprintf(buf, sizeof buf, "#%02x%02xff", fade, fade);
  return buf;
}

} // namespace

void write_feature_csv(const FeatureTable &t, const std::string &path) {
  auto out = open_out(path);
  out << "id";
  for (std::size_t k = 0; k < t.width; ++k) out << ",f" << k;
  out << ",label\n";
  for (std::size_t r = 0; r < t.ids.size(); ++r) {
    out << t.ids[r];
    for (std::size_t k = 0; k < t.width; ++k) out << ',' << num(t.values[r * t.width + k]);
    out << ',' << t.labels[r] << '\n';
  }
}

void write_kernels_csv(const ComposedKernelSet &set, const std::string &path) {
  auto out = open_out(path);
  out << "# " << set.first << " then " << set.second << (set.exact ? "" : " (approximate: BN/ReLU between)")
      << ", window " << num(set.window_s) << " s\n";
  out << "feature_channel,source_channel";
  for (std::size_t k = 0; k < set.length; ++k) out << ",tap" << k;
  out << '\n';
  for (std::size_t ch = 0; ch < set.taps.size(); ++ch) {
    out << ch << ',' << set.source_channel[ch];
    for (double x : set.taps[ch]) out << ',' << num(x);
    out << '\n';
  }
}

void write_channel_attention_csv(const ChannelAttention &att, const std::string &path) {
  auto out = open_out(path);
  out << "stream,kernel_size,channel,raw,normalized\n";
  for (std::size_t s = 0; s < att.channel.size(); ++s)
    for (std::size_t m = 0; m < att.channel[s].size(); ++m)
      out << s << ',' << att.kernel_sizes[s] << ',' << att.channel_names[m] << ',' << num(att.channel[s][m]) << ','
          << num(att.normalized[s][m]) << '\n';
}

void write_self_attention_csv(const SelfAttentionTrace &trace, const std::string &path) {
  auto out = open_out(path);
  out << "token,time_s,raw,normalized";
  for (std::size_t l = 0; l < trace.per_layer.size(); ++l) out << ",layer" << l;
  out << '\n';
  for (std::size_t j = 0; j < trace.raw.size(); ++j) {
    out << j << ',' << num((static_cast<double>(j) + 0.5) * trace.seconds_per_token) << ',' << num(trace.raw[j])
        << ',' << num(trace.normalized[j]);
    for (const auto &layer : trace.per_layer) out << ',' << num(layer[j]);
    out << '\n';
  }
}

void write_channel_attention_svg(const ChannelAttention &att, const std::string &path) {
  const int cell = 18, left = 60, top = 20;
  const auto rows = att.normalized.size(), cols = att.channel_names.size();
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cell * static_cast<int>(cols) + 10
    << "\" height=\"" << top + cell * static_cast<int>(rows) + 60 << "\" font-family=\"sans-serif\" font-size=\"9\">\n";
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = top + cell * static_cast<int>(r);
    s << "<text x=\"4\" y=\"" << y + 12 << "\">k=" << att.kernel_sizes[r] << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c)
      s << "<rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << y << "\" width=\"" << cell
        << "\" height=\"" << cell << "\" fill=\"" << diverging(att.normalized[r][c]) << "\"/>\n";
  }
  for (std::size_t c = 0; c < cols; ++c) {
    const int x = left + cell * static_cast<int>(c) + 12;
    const int y = top + cell * static_cast<int>(rows) + 6;
    s << "<text transform=\"translate(" << x << "," << y << ") rotate(90)\">" << att.channel_names[c] << "</text>\n";
  }
  s << "</svg>\n";
  open_out(path) << s.str();
}

void write_self_attention_svg(const SelfAttentionTrace &trace, const std::string &path) {
  const int w = 600, h = 160, pad = 30;
  const auto n = trace.normalized.size();
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  const double bw = static_cast<double>(w - 2 * pad) / static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t j = 0; j < n; ++j) {
    const double bh = trace.normalized[j] * (h - 2 * pad);
    s << "<rect x=\"" << num(pad + bw * static_cast<double>(j)) << "\" y=\"" << num(h - pad - bh) << "\" width=\""
      << num(bw) << "\" height=\"" << num(bh) << "\" fill=\"#c0392b\"/>\n";
  }
  s << "<text x=\"" << pad << "\" y=\"" << h - 8 << "\">0 s</text>\n";
  s << "<text x=\"" << w - pad - 40 << "\" y=\"" << h - 8 << "\">"
    << num(std::round(trace.seconds_per_token * static_cast<double>(n) * 100) / 100) << " s</text>\n";
  s << "</svg>\n";
  open_out(path) << s.str();
}

} // namespace mactn
