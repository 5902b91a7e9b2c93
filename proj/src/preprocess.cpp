#include "mactn/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "mactn/errors.hpp"

namespace mactn {

using cd = std::complex<double>;

Recording::Recording(std::vector<std::string> names, double fs, std::size_t n_samples)
    : channels(std::move(names)), sample_rate(fs), samples(n_samples), values(channels.size() * n_samples, 0.0) {}

std::size_t Recording::channel_index(const std::string &name) const {
  auto it = std::find(channels.begin(), channels.end(), name);
  if (it == channels.end()) throw ConfigError("unknown channel name '" + name + "'");
  return static_cast<std::size_t>(it - channels.begin());
}

// ---------------------------------------------------------------------------
// Channel handling

namespace {

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string &line) { return trim(line.substr(0, line.find('#'))); }

std::string slurp(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

MontageSpec parse_montage(const std::string &text) {
  MontageSpec spec;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_comment(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      throw ConfigError("montage line " + std::to_string(lineno) + ": expected 'A,B'");
    auto a = trim(line.substr(0, comma)), b = trim(line.substr(comma + 1));
    if (a.empty() || b.empty()) throw ConfigError("montage line " + std::to_string(lineno) + ": empty channel name");
    spec.pairs.emplace_back(a, b);
  }
  return spec;
}

MontageSpec read_montage(const std::string &path) { return parse_montage(slurp(path)); }

std::vector<std::string> parse_channel_list(const std::string &text) {
  std::vector<std::string> names;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream parts(strip_comment(line));
    std::string name;
    while (std::getline(parts, name, ','))
      if (auto t = trim(name); !t.empty()) names.push_back(t);
  }
  return names;
}

std::vector<std::string> read_channel_list(const std::string &path) { return parse_channel_list(slurp(path)); }

Recording apply_montage(const Recording &x, const MontageSpec &spec) {
  std::vector<std::string> names;
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (auto &[a, b] : spec.pairs) {
    idx.emplace_back(x.channel_index(a), x.channel_index(b));
    names.push_back(a + "-" + b);
  }
  Recording out(std::move(names), x.sample_rate, x.samples);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto pos = x.row(idx[i].first), neg = x.row(idx[i].second);
    auto dst = out.row(i);
    for (std::size_t t = 0; t < x.samples; ++t) dst[t] = pos[t] - neg[t];
  }
  return out;
}

Recording select_channels(const Recording &x, const std::vector<std::string> &names) {
  Recording out(names, x.sample_rate, x.samples);
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto src = x.row(x.channel_index(names[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

MontageSpec thu_ep_montage() {
  // Pair 28 is pair 21 reversed, giving the two mirror-image montages.
  return MontageSpec{{{"Fp1", "F7"}, {"F7", "T7"},  {"T7", "P7"},   {"P7", "O1"},   {"Fp2", "F8"},  {"F8", "T8"},
                      {"T8", "P8"},  {"P8", "O2"},  {"Fp1", "F3"},  {"F3", "C3"},   {"C3", "P3"},   {"P3", "O1"},
                      {"Fp2", "F4"}, {"F4", "C4"},  {"C4", "P4"},   {"P4", "O2"},   {"Fz", "Cz"},   {"Cz", "Pz"},
                      {"Pz", "Oz"},  {"FC5", "CP5"}, {"FC1", "CP1"}, {"FC2", "CP2"}, {"FC6", "CP6"}, {"PO3", "O1"},
                      {"PO4", "O2"}, {"F3", "FC1"}, {"F4", "FC2"},  {"CP1", "FC1"}, {"T7", "C3"},   {"C4", "T8"}}};
}

std::vector<std::string> thu_ep_source_channels() {
  return {"Fp1", "Fp2", "Fz",  "F3",  "F4",  "F7", "F8", "FC1", "FC2", "FC5", "FC6", "Cz", "C3",  "C4",  "T7", "T8",
          "CP1", "CP2", "CP5", "CP6", "Pz",  "P3", "P4", "P7",  "P8",  "PO3", "PO4", "Oz", "O1",  "O2",  "A1", "A2"};
}

std::vector<std::string> deap_source_channels() {
  return {"Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "Oz", "Pz",
          "Fp2", "AF4", "Fz", "F4", "F8",  "FC6", "FC2", "Cz", "C4",  "T8",  "CP6", "CP2", "P4", "P8", "PO4", "O2"};
}

std::vector<std::string> deap_selected_channels() {
  return {"Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1",
          "Fp2", "AF4", "F4", "F8", "FC6", "FC2", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2"};
}

// ---------------------------------------------------------------------------
// Filters

namespace {

// Groups roots into conjugate or real pairs. Real roots are paired after
// sorting, either neighbour-to-neighbour or outermost-first.
std::vector<std::pair<cd, cd>> pair_roots(std::vector<cd> roots, bool outermost_first) {
  std::vector<std::pair<cd, cd>> out;
  std::vector<double> reals;
  for (auto r : roots) {
    if (std::abs(r.imag()) <= 1e-12 * std::max(1.0, std::abs(r))) reals.push_back(r.real());
    else if (r.imag() > 0) out.emplace_back(r, std::conj(r));
  }
  std::sort(reals.begin(), reals.end());
  if (reals.size() % 2) throw ContractError("butterworth: unpaired real root");
  const std::size_t h = reals.size() / 2;
  for (std::size_t i = 0; i < h; ++i) {
    if (outermost_first) out.emplace_back(reals[i], reals[reals.size() - 1 - i]);
    else out.emplace_back(reals[2 * i], reals[2 * i + 1]);
  }
  return out;
}

} // namespace

FilterSpec design_butterworth(FilterKind kind, double low, double high, int order, double fs) {
  if (!(fs > 0)) throw ConfigError("butterworth: sample rate must be positive");
  if (order < 2 || order % 2) throw ConfigError("butterworth: order must be even and >= 2");
  if (!(low > 0 && low < high)) throw ConfigError("butterworth: need 0 < low < high");
  if (!(high < fs / 2)) throw ConfigError("butterworth: corner frequencies must lie below Nyquist");

  const int n = order / 2;
  const double fs2 = 2.0 * fs;
  const double wl = fs2 * std::tan(M_PI * low / fs), wh = fs2 * std::tan(M_PI * high / fs);
  const double w0 = std::sqrt(wl * wh), bw = wh - wl;

  std::vector<cd> proto;
  for (int k = 0; k < n; ++k) proto.push_back(std::polar(1.0, M_PI * (2 * k + n + 1) / (2.0 * n)));

  std::vector<cd> zs, ps;
  double gain = 1.0;
  if (kind == FilterKind::Bandpass) {
    for (auto p : proto) {
      const cd c = p * bw / 2.0, r = std::sqrt(c * c - w0 * w0);
      ps.push_back(c + r);
      ps.push_back(c - r);
    }
    zs.assign(n, cd(0.0));
    gain = std::pow(bw, n);
  } else {
    for (auto p : proto) {
      const cd c = (bw / 2.0) / p, r = std::sqrt(c * c - w0 * w0);
      ps.push_back(c + r);
      ps.push_back(c - r);
    }
    for (int k = 0; k < n; ++k) {
      zs.emplace_back(0.0, w0);
      zs.emplace_back(0.0, -w0);
    }
    cd prod(1.0);
    for (auto p : proto) prod *= -p;
    gain = (1.0 / prod).real();
  }

  // Bilinear transform; zeros at infinity land on z = -1.
  cd num(1.0), den(1.0);
  for (auto z : zs) num *= fs2 - z;
  for (auto p : ps) den *= fs2 - p;
  gain *= (num / den).real();
  std::vector<cd> zd, pd;
  for (auto z : zs) zd.push_back((fs2 + z) / (fs2 - z));
  for (auto p : ps) pd.push_back((fs2 + p) / (fs2 - p));
  while (zd.size() < pd.size()) zd.emplace_back(-1.0);

  FilterSpec spec;
  spec.kind = kind;
  spec.order = order;
  spec.low_hz = low;
  spec.high_hz = high;
  spec.sample_rate = fs;
  spec.poles = pd;

  const auto pole_pairs = pair_roots(pd, false);
  const auto zero_pairs = pair_roots(zd, true);
  if (pole_pairs.size() != static_cast<std::size_t>(n) || zero_pairs.size() != static_cast<std::size_t>(n))
    throw ContractError("butterworth: section count mismatch");
  for (int i = 0; i < n; ++i) {
    auto [z1, z2] = zero_pairs[i];
    auto [p1, p2] = pole_pairs[i];
    Biquad s;
    s.b0 = 1.0;
    s.b1 = -(z1 + z2).real();
    s.b2 = (z1 * z2).real();
    s.a1 = -(p1 + p2).real();
    s.a2 = (p1 * p2).real();
    if (i == 0) {
      s.b0 *= gain;
      s.b1 *= gain;
      s.b2 *= gain;
    }
    spec.sections.push_back(s);
  }
  return spec;
}

std::complex<double> frequency_response(const FilterSpec &spec, double f) {
  const cd zi = std::polar(1.0, -2.0 * M_PI * f / spec.sample_rate); // z^-1
  cd h(1.0);
  for (auto &s : spec.sections) h *= (s.b0 + zi * (s.b1 + zi * s.b2)) / (1.0 + zi * (s.a1 + zi * s.a2));
  return h;
}

double magnitude_db(const FilterSpec &spec, double f) { return 20.0 * std::log10(std::abs(frequency_response(spec, f))); }

bool is_stable(const FilterSpec &spec) {
  for (auto &s : spec.sections) {
    // Roots of z^2 + a1 z + a2.
    const cd disc = std::sqrt(cd(s.a1 * s.a1 - 4.0 * s.a2));
    if (std::abs((-s.a1 + disc) / 2.0) >= 1.0 || std::abs((-s.a1 - disc) / 2.0) >= 1.0) return false;
  }
  return !spec.sections.empty();
}

std::vector<double> filter_signal(std::span<const double> x, const FilterSpec &spec) {
  std::vector<double> y(x.begin(), x.end());
  for (auto &s : spec.sections) {
    double z1 = 0.0, z2 = 0.0;
    for (auto &v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

Recording apply_filter(const Recording &x, const FilterSpec &spec) {
  Recording out = x;
  for (std::size_t c = 0; c < x.n_channels(); ++c) {
    auto y = filter_signal(x.row(c), spec);
    std::copy(y.begin(), y.end(), out.row(c).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling, segmentation, normalization

Recording resample_down(const Recording &x, std::size_t factor) {
  if (factor == 0) throw ConfigError("resample: factor must be >= 1");
  const std::size_t n = x.samples / factor;
  Recording out(x.channels, x.sample_rate / static_cast<double>(factor), n);
  for (std::size_t c = 0; c < x.n_channels(); ++c) {
    auto src = x.row(c);
    auto dst = out.row(c);
    for (std::size_t t = 0; t < n; ++t) dst[t] = src[t * factor];
  }
  return out;
}

Recording resample_to(const Recording &x, double target_rate) {
  if (!(target_rate > 0)) throw ConfigError("resample: target rate must be positive");
  const double ratio = x.sample_rate / target_rate;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9 * ratio)
    throw ConfigError("resample: " + std::to_string(x.sample_rate) + " Hz -> " + std::to_string(target_rate) +
                      " Hz is not an integer decimation");
  return resample_down(x, static_cast<std::size_t>(rounded));
}

void WindowSpec::validate() const {
  if (!(step_s > 0) || !(window_s >= step_s)) throw ConfigError("window: need window_s >= step_s > 0");
}

std::size_t segment_count(std::size_t total, std::size_t window, std::size_t step) {
  if (window == 0 || step == 0) throw ConfigError("segment_count: window and step must be positive");
  return total < window ? 0 : (total - window) / step + 1;
}

namespace {

std::size_t to_samples(double seconds, double fs, const char *what) {
  const double v = seconds * fs;
  const double r = std::round(v);
  if (r < 1.0 || std::abs(v - r) > 1e-6) throw ConfigError(std::string("window: ") + what + " is not a whole number of samples");
  return static_cast<std::size_t>(r);
}

} // namespace

Segmentation segment_sliding(const Recording &x, const WindowSpec &spec) {
  spec.validate();
  const std::size_t w = to_samples(spec.window_s, x.sample_rate, "window length");
  const std::size_t st = to_samples(spec.step_s, x.sample_rate, "step");
  Segmentation out;
  const std::size_t n = segment_count(x.samples, w, st);
  if (n == 0) {
    std::ostringstream msg;
    msg << "trial of " << x.duration_s() << " s is shorter than the " << spec.window_s << " s window; no segments";
    out.warnings.push_back(msg.str());
    return out;
  }
  for (std::size_t k = 0; k < n; ++k) {
    Recording seg(x.channels, x.sample_rate, w);
    for (std::size_t c = 0; c < x.n_channels(); ++c) {
      auto src = x.row(c).subspan(k * st, w);
      std::copy(src.begin(), src.end(), seg.row(c).begin());
    }
    out.segments.push_back(std::move(seg));
  }
  return out;
}

Recording zscore_segment(const Recording &x, double eps) {
  Recording out = x;
  if (x.samples == 0) return out;
  const double n = static_cast<double>(x.samples);
  for (std::size_t c = 0; c < x.n_channels(); ++c) {
    auto r = out.row(c);
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : r) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / n);
    for (auto &v : r) v = (v - mean) / (sd + eps);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines

PipelineConfig PipelineConfig::thu_ep() {
  PipelineConfig c;
  c.profile = "thu_ep";
  c.montage = thu_ep_montage();
  c.window = {14.0, 4.0};
  c.notch = {true, 48.0, 52.0};
  c.bandpass = {true, 0.5, 45.0};
  c.target_rate = 125.0;
  return c;
}

PipelineConfig PipelineConfig::deap() {
  PipelineConfig c;
  c.profile = "deap";
  c.channel_select = deap_selected_channels();
  c.window = {12.0, 4.0};
  return c;
}

PipelineConfig PipelineConfig::by_name(const std::string &profile) {
  if (profile == "thu_ep") return thu_ep();
  if (profile == "deap") return deap();
  if (profile == "custom") return PipelineConfig{};
  throw ConfigError("unknown preprocessing profile '" + profile + "' (expected thu_ep, deap or custom)");
}

std::vector<Recording> preprocess_trial(const Recording &trial, const PipelineConfig &cfg,
                                        std::vector<std::string> *warnings) {
  if (!(trial.sample_rate > 0)) throw ConfigError("preprocess: recording has no sample rate");
  if (trial.values.size() != trial.n_channels() * trial.samples)
    throw DimensionError("preprocess: recording value count does not match channels x samples");

  Recording x = !cfg.montage.pairs.empty()    ? apply_montage(trial, cfg.montage)
                : !cfg.channel_select.empty() ? select_channels(trial, cfg.channel_select)
                                              : trial;
  auto seg = segment_sliding(x, cfg.window);
  if (warnings) warnings->insert(warnings->end(), seg.warnings.begin(), seg.warnings.end());

  std::optional<FilterSpec> notch, band;
  if (cfg.notch.enabled)
    notch = design_butterworth(FilterKind::Bandstop, cfg.notch.low_hz, cfg.notch.high_hz, cfg.filter_order,
                               trial.sample_rate);
  if (cfg.bandpass.enabled)
    band = design_butterworth(FilterKind::Bandpass, cfg.bandpass.low_hz, cfg.bandpass.high_hz, cfg.filter_order,
                              trial.sample_rate);

  std::vector<Recording> out;
  out.reserve(seg.segments.size());
  for (auto &s : seg.segments) {
    Recording r = std::move(s);
    if (notch) r = apply_filter(r, *notch);
    if (band) r = apply_filter(r, *band);
    if (cfg.target_rate > 0 && cfg.target_rate != r.sample_rate) r = resample_to(r, cfg.target_rate);
    if (cfg.zscore) r = zscore_segment(r, cfg.zscore_eps);
    out.push_back(std::move(r));
  }
  return out;
}

} // namespace mactn
