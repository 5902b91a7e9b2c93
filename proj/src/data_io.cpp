#include "mactn/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mactn {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<unsigned char> read_file(const fs::path &p, const std::string &what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingFileError(what + ": cannot open " + p.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path &p, std::span<const unsigned char> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + p.string());
}

void write_text(const fs::path &p, const std::string &text) {
  write_file(p, std::span(reinterpret_cast<const unsigned char *>(text.data()), text.size()));
}

json read_json(const fs::path &p, const std::string &what) {
  const auto bytes = read_file(p, what);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception &e) {
    throw ManifestError(what + ": malformed JSON in " + p.string() + ": " + e.what());
  }
}

void check_version(const json &j, const std::string &what) {
  if (!j.is_object() || !j.contains("format_version"))
    throw ManifestError(what + ": manifest has no format_version");
  const auto &v = j.at("format_version");
  if (!v.is_string() || v.get<std::string>() != kFormatVersion)
    throw FormatVersionError(what + ": unsupported format_version " + v.dump() + " (expected \"" + kFormatVersion +
                             "\")");
}

bool valid_id(const std::string &id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'; });
}

std::string trial_file(const std::string &id) { return "trial_" + id + ".raw"; }

void put_f32(std::vector<unsigned char> &out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f32(const unsigned char *p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

void put_f64(std::vector<unsigned char> &out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f64(const unsigned char *p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

template <typename T> T field(const json &j, const char *key, const std::string &what) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception &e) {
    throw ManifestError(what + ": bad or missing field '" + key + "': " + e.what());
  }
}

} // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Bundles

void EegBundle::validate() const {
  if (!valid_id(subject_id)) throw ManifestError("bundle: invalid subject id '" + subject_id + "'");
  if (kind != "raw" && kind != "segments") throw ManifestError("bundle: unknown kind '" + kind + "'");
  if (!(sample_rate_hz > 0)) throw ManifestError("bundle " + subject_id + ": sample rate must be positive");
  std::vector<std::string> ids;
  for (auto &t : trials) {
    if (!valid_id(t.trial_id)) throw ManifestError("bundle " + subject_id + ": invalid trial id '" + t.trial_id + "'");
    if (t.data.size() != channel_names.size() * t.n_samples)
      throw SizeMismatchError("bundle " + subject_id + ", trial " + t.trial_id + ": data holds " +
                              std::to_string(t.data.size()) + " values, expected " +
                              std::to_string(channel_names.size()) + " x " + std::to_string(t.n_samples));
    if (n_classes > 0 && t.label >= static_cast<int>(n_classes))
      throw ManifestError("bundle " + subject_id + ", trial " + t.trial_id + ": label out of range");
    ids.push_back(t.trial_id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw ManifestError("bundle " + subject_id + ": duplicate trial ids");
}

Recording EegBundle::trial_recording(std::size_t i) const {
  const auto &t = trials.at(i);
  Recording r(channel_names, sample_rate_hz, t.n_samples);
  r.values = t.data;
  return r;
}

void write_bundle(const EegBundle &b, const std::string &dir) {
  b.validate();
  fs::create_directories(dir);
  json trials = json::array();
  for (auto &t : b.trials) {
    std::vector<unsigned char> bytes;
    bytes.reserve(t.data.size() * 4);
    for (double v : t.data) {
      if (!std::isfinite(v) || std::abs(v) > std::numeric_limits<float>::max())
        throw DataError("bundle " + b.subject_id + ", trial " + t.trial_id + ": value not representable as float32");
      put_f32(bytes, v);
    }
    write_file(fs::path(dir) / trial_file(t.trial_id), bytes);
    json jt = {{"trial_id", t.trial_id},
               {"source_trial", t.source_trial.empty() ? t.trial_id : t.source_trial},
               {"label", t.label},
               {"ratings", t.ratings},
               {"n_samples", t.n_samples},
               {"file", trial_file(t.trial_id)},
               {"bytes", bytes.size()},
               {"checksum", hex64(fnv1a64(bytes))}};
    trials.push_back(std::move(jt));
  }
  json m = {{"format_version", kFormatVersion},
            {"kind", b.kind},
            {"subject_id", b.subject_id},
            {"sample_rate_hz", b.sample_rate_hz},
            {"channel_names", b.channel_names},
            {"n_classes", b.n_classes},
            {"trials", trials}};
  write_text(fs::path(dir) / "manifest.json", m.dump(2) + "\n");
}

EegBundle load_bundle(const std::string &dir) {
  const auto mpath = fs::path(dir) / "manifest.json";
  if (!fs::exists(mpath)) throw MissingFileError("bundle: no manifest.json in " + dir);
  const json m = read_json(mpath, "bundle");
  check_version(m, "bundle " + dir);

  const std::string what = "bundle " + dir;
  EegBundle b;
  b.subject_id = field<std::string>(m, "subject_id", what);
  b.kind = field<std::string>(m, "kind", what);
  b.sample_rate_hz = field<double>(m, "sample_rate_hz", what);
  b.channel_names = field<std::vector<std::string>>(m, "channel_names", what);
  b.n_classes = field<std::size_t>(m, "n_classes", what);
  const auto jt = field<json>(m, "trials", what);
  if (!jt.is_array()) throw ManifestError(what + ": 'trials' must be an array");
  const std::size_t C = b.channel_names.size();

  for (auto &t : jt) {
    Trial tr;
    tr.trial_id = field<std::string>(t, "trial_id", what);
    if (!valid_id(tr.trial_id)) throw ManifestError(what + ": invalid trial id '" + tr.trial_id + "'");
    const std::string tw = what + ", trial " + tr.trial_id;
    tr.source_trial = field<std::string>(t, "source_trial", tw);
    tr.label = field<int>(t, "label", tw);
    tr.ratings = field<std::map<std::string, double>>(t, "ratings", tw);
    tr.n_samples = field<std::size_t>(t, "n_samples", tw);
    const auto checksum = field<std::string>(t, "checksum", tw);

    const auto path = fs::path(dir) / trial_file(tr.trial_id);
    if (!fs::exists(path)) throw MissingFileError(tw + ": missing raw file " + path.string());
    if (C > 0 && tr.n_samples > std::numeric_limits<std::size_t>::max() / (4 * C))
      throw ManifestError(tw + ": n_samples overflows");
    const std::size_t expected = 4 * C * tr.n_samples;
    const auto actual = fs::file_size(path);
    if (actual != expected)
      throw SizeMismatchError(tw + ": raw file has " + std::to_string(actual) + " bytes, expected " +
                              std::to_string(expected) + " (" + std::to_string(C) + " channels x " +
                              std::to_string(tr.n_samples) + " samples x 4)");
    const auto bytes = read_file(path, tw);
    if (bytes.size() != expected) throw SizeMismatchError(tw + ": short read");
    if (hex64(fnv1a64(bytes)) != checksum) throw ChecksumError(tw + ": checksum mismatch in " + path.string());
    tr.data.resize(C * tr.n_samples);
    for (std::size_t i = 0; i < tr.data.size(); ++i) tr.data[i] = get_f32(bytes.data() + 4 * i);
    b.trials.push_back(std::move(tr));
  }
  b.validate();
  return b;
}

std::vector<EegBundle> load_bundles(const std::string &root) {
  if (fs::exists(fs::path(root) / "manifest.json")) return {load_bundle(root)};
  if (!fs::is_directory(root)) throw MissingFileError("no bundle directory at " + root);
  std::vector<std::string> dirs;
  for (auto &e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw MissingFileError("no bundles under " + root);
  std::vector<EegBundle> out;
  for (auto &d : dirs) out.push_back(load_bundle(d));
  return out;
}

int binarize_deap_rating(double rating, double threshold) {
  if (!(rating >= 1.0 && rating <= 9.0))
    throw ConfigError("DEAP rating " + std::to_string(rating) + " outside [1, 9]");
  return rating > threshold ? 1 : 0;
}

void binarize_deap_labels(EegBundle &b, const std::string &dimension, double threshold) {
  if (dimension != "arousal" && dimension != "valence")
    throw ConfigError("label dimension must be arousal or valence, got '" + dimension + "'");
  for (auto &t : b.trials) {
    auto it = t.ratings.find(dimension);
    if (it == t.ratings.end())
      throw ManifestError("bundle " + b.subject_id + ", trial " + t.trial_id + ": no " + dimension + " rating");
    t.label = binarize_deap_rating(it->second, threshold);
  }
  b.n_classes = 2;
}

EegBundle preprocess_bundle(const EegBundle &raw, const PipelineConfig &config, std::vector<std::string> *warnings) {
  EegBundle out;
  out.subject_id = raw.subject_id;
  out.kind = "segments";
  out.n_classes = raw.n_classes;
  out.sample_rate_hz = config.target_rate > 0 ? config.target_rate : raw.sample_rate_hz;
  if (!config.montage.pairs.empty()) {
    for (auto &[a, b] : config.montage.pairs) out.channel_names.push_back(a + "-" + b);
  } else if (!config.channel_select.empty()) {
    out.channel_names = config.channel_select;
  } else {
    out.channel_names = raw.channel_names;
  }
  for (std::size_t i = 0; i < raw.trials.size(); ++i) {
    const auto &t = raw.trials[i];
    std::vector<std::string> local;
    auto segs = preprocess_trial(raw.trial_recording(i), config, &local);
    if (warnings)
      for (auto &w : local) warnings->push_back(raw.subject_id + "/" + t.trial_id + ": " + w);
    for (std::size_t k = 0; k < segs.size(); ++k) {
      Trial s;
      char suffix[16];
      std::snprintf(suffix, sizeof suffix, "_s%02zu", k);
      s.trial_id = t.trial_id + suffix;
      s.source_trial = t.source_trial.empty() ? t.trial_id : t.source_trial;
      s.label = t.label;
      s.ratings = t.ratings;
      s.n_samples = segs[k].samples;
      // Stored as float32 on disk; rounding here keeps in-memory and on-disk data identical.
      s.data.resize(segs[k].values.size());
      for (std::size_t j = 0; j < s.data.size(); ++j) s.data[j] = static_cast<float>(segs[k].values[j]);
      out.sample_rate_hz = segs[k].sample_rate;
      out.trials.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic EEG

void SynthProfile::validate() const {
  if (n_subjects == 0 || n_channels == 0 || n_trials_per_class == 0)
    throw ConfigError("synth: subjects, channels and trials per class must be positive");
  if (classes.size() < 2) throw ConfigError("synth: need at least two classes");
  if (!(sample_rate > 0) || !(trial_len_s > 0)) throw ConfigError("synth: sample rate and trial length must be positive");
  for (auto &c : classes) {
    if (!(c.amplitude >= 0)) throw ConfigError("synth: class amplitudes must be >= 0");
    if (!(c.bandwidth_hz > 0) || !(c.center_hz - c.bandwidth_hz / 2 > 0) ||
        !(c.center_hz + c.bandwidth_hz / 2 < sample_rate / 2))
      throw ConfigError("synth: class band must lie strictly between 0 and Nyquist");
  }
  if (!(noise_level >= 0) || !(line_noise >= 0) || !(subject_variability >= 0))
    throw ConfigError("synth: noise levels and variability must be >= 0");
  if (line_noise > 0 && !(50.0 < sample_rate / 2)) throw ConfigError("synth: 50 Hz line noise above Nyquist");
}

void SynthProfile::set_snr_db(double snr_db) {
  const double amp = noise_level * std::pow(10.0, snr_db / 20.0);
  for (auto &c : classes) c.amplitude = amp;
}

namespace {

void normalize_rms(std::vector<double> &x, double target) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double r = std::sqrt(ss / static_cast<double>(x.size()));
  const double k = r > 0 ? target / r : 0.0;
  for (auto &v : x) v *= k;
}

// Pink (1/f) noise from white noise with a parallel bank of one-pole filters.
std::vector<double> pink_noise(std::size_t n, std::size_t warmup, Rng &rng) {
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n + warmup; ++i) {
    const double w = rng.normal();
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    const double pink = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
    b6 = w * 0.115926;
    if (i >= warmup) out.push_back(pink);
  }
  return out;
}

std::vector<double> narrowband(const ClassBand &band, double fs, std::size_t n, std::size_t warmup, Rng &rng) {
  const auto f = design_butterworth(FilterKind::Bandpass, band.center_hz - band.bandwidth_hz / 2,
                                    band.center_hz + band.bandwidth_hz / 2, 4, fs);
  std::vector<double> w(n + warmup);
  for (auto &v : w) v = rng.normal();
  auto y = filter_signal(w, f);
  return std::vector<double>(y.begin() + static_cast<std::ptrdiff_t>(warmup), y.end());
}

} // namespace

std::vector<EegBundle> synth_generate(const SynthProfile &p, std::uint64_t seed) {
  p.validate();
  Rng master(seed);
  const auto n = static_cast<std::size_t>(std::lround(p.trial_len_s * p.sample_rate));
  const auto warmup = static_cast<std::size_t>(std::lround(4.0 * p.sample_rate));
  std::vector<EegBundle> out;
  for (std::size_t s = 0; s < p.n_subjects; ++s) {
    Rng rng = master.fork();
    EegBundle b;
    char id[16];
    std::snprintf(id, sizeof id, "s%02zu", s);
    b.subject_id = id;
    b.sample_rate_hz = p.sample_rate;
    b.n_classes = p.classes.size();
    for (std::size_t c = 0; c < p.n_channels; ++c) b.channel_names.push_back("ch" + std::to_string(c));

    // Individual differences: how strongly the class source projects onto each channel.
    std::vector<double> gain(p.n_channels);
    for (auto &g : gain) g = std::max(0.1, 1.0 + p.subject_variability * rng.normal());

    std::size_t idx = 0;
    for (std::size_t k = 0; k < p.n_trials_per_class; ++k) {
      for (std::size_t cls = 0; cls < p.classes.size(); ++cls, ++idx) {
        Trial t;
        char tid[16];
        std::snprintf(tid, sizeof tid, "t%03zu", idx);
        t.trial_id = tid;
        t.source_trial = tid;
        t.label = static_cast<int>(cls);
        t.n_samples = n;
        t.data.resize(p.n_channels * n);

        std::vector<double> src;
        if (p.classes[cls].amplitude > 0) {
          src = narrowband(p.classes[cls], p.sample_rate, n, warmup, rng);
          normalize_rms(src, p.classes[cls].amplitude);
        }
        for (std::size_t c = 0; c < p.n_channels; ++c) {
          auto bg = pink_noise(n, warmup, rng);
          normalize_rms(bg, p.noise_level);
          const double phase = rng.uniform(0.0, 2.0 * M_PI);
          for (std::size_t i = 0; i < n; ++i) {
            double v = bg[i];
            if (!src.empty()) v += gain[c] * src[i];
            if (p.line_noise > 0)
              v += p.line_noise * std::sin(2.0 * M_PI * 50.0 * static_cast<double>(i) / p.sample_rate + phase);
            t.data[c * n + i] = static_cast<float>(v);
          }
        }
        b.trials.push_back(std::move(t));
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config JSON

json to_json(const ModelConfig &c) {
  return {{"n_channels", c.n_channels},
          {"input_len", c.input_len},
          {"channel_multiplier", c.channel_multiplier},
          {"conv_kernel", c.conv_kernel},
          {"n_sconv_blocks", c.n_sconv_blocks},
          {"pool1", c.pool1},
          {"pool2", c.pool2},
          {"sk_kernel_sizes", c.sk_kernel_sizes},
          {"sk_reduction", c.sk_reduction},
          {"sk_min_dim", c.sk_min_dim},
          {"n_encoder_layers", c.n_encoder_layers},
          {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},
          {"mlp_dim", c.mlp_dim},
          {"n_classes", c.n_classes},
          {"dropout", c.dropout},
          {"use_ltfe", c.use_ltfe},
          {"use_depth_block", c.use_depth_block},
          {"use_sconv_block", c.use_sconv_block},
          {"use_sk_attention", c.use_sk_attention},
          {"use_gtfe", c.use_gtfe}};
}

ModelConfig model_config_from_json(const json &j) {
  if (!j.is_object()) throw ManifestError("model config must be a JSON object");
  ModelConfig c;
  const json defaults = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw ManifestError("model config: unknown key '" + it.key() + "'");
  auto get = [&](const char *key, auto &dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const json::exception &e) {
      throw ManifestError(std::string("model config: bad value for '") + key + "': " + e.what());
    }
  };
  get("n_channels", c.n_channels);
  get("input_len", c.input_len);
  get("channel_multiplier", c.channel_multiplier);
  get("conv_kernel", c.conv_kernel);
  get("n_sconv_blocks", c.n_sconv_blocks);
  get("pool1", c.pool1);
  get("pool2", c.pool2);
  get("sk_kernel_sizes", c.sk_kernel_sizes);
  get("sk_reduction", c.sk_reduction);
  get("sk_min_dim", c.sk_min_dim);
  get("n_encoder_layers", c.n_encoder_layers);
  get("n_heads", c.n_heads);
  get("head_dim", c.head_dim);
  get("mlp_dim", c.mlp_dim);
  get("n_classes", c.n_classes);
  get("dropout", c.dropout);
  get("use_ltfe", c.use_ltfe);
  get("use_depth_block", c.use_depth_block);
  get("use_sconv_block", c.use_sconv_block);
  get("use_sk_attention", c.use_sk_attention);
  get("use_gtfe", c.use_gtfe);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string &dir, const MactnModel &model, const AdamWState *opt) {
  fs::create_directories(dir);
  std::vector<unsigned char> blob;
  json arrays = json::array();
  std::size_t offset = 0;
  auto add = [&](const std::string &name, const std::string &role, const Shape &shape, std::span<const double> v) {
    arrays.push_back({{"name", name}, {"role", role}, {"shape", shape}, {"offset", offset}, {"count", v.size()}});
    for (double x : v) put_f64(blob, x);
    offset += v.size();
  };
  const auto &store = model.parameters();
  for (auto &[name, t] : store.parameters()) add(name, "parameter", t.shape(), t.data());
  for (auto &[name, t] : store.buffers()) add(name, "buffer", t.shape(), t.data());
  if (opt && !opt->m.empty()) {
    const auto &params = store.parameters();
    if (opt->m.size() != params.size() || opt->v.size() != params.size())
      throw DimensionError("checkpoint: optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      add(params[i].first, "adam_m", params[i].second.shape(), opt->m[i]);
      add(params[i].first, "adam_v", params[i].second.shape(), opt->v[i]);
    }
  }
  json m = {{"format_version", kFormatVersion},
            {"config", to_json(model.config())},
            {"seed", model.seed()},
            {"arrays", arrays},
            {"blob_bytes", blob.size()},
            {"checksum", hex64(fnv1a64(blob))}};
  if (opt) m["optimizer_step"] = opt->step;
  write_file(fs::path(dir) / "model.blob", blob);
  write_text(fs::path(dir) / "model.manifest", m.dump(2) + "\n");
}

std::unique_ptr<MactnModel> load_checkpoint(const std::string &dir, AdamWState *opt) {
  const std::string what = "checkpoint " + dir;
  const auto mpath = fs::path(dir) / "model.manifest", bpath = fs::path(dir) / "model.blob";
  if (!fs::exists(mpath)) throw MissingFileError(what + ": no model.manifest");
  const json m = read_json(mpath, what);
  check_version(m, what);
  if (!fs::exists(bpath)) throw MissingFileError(what + ": no model.blob");
  const auto blob = read_file(bpath, what);
  const auto declared = field<std::size_t>(m, "blob_bytes", what);
  if (blob.size() != declared)
    throw SizeMismatchError(what + ": blob has " + std::to_string(blob.size()) + " bytes, manifest declares " +
                            std::to_string(declared));
  if (hex64(fnv1a64(blob)) != field<std::string>(m, "checksum", what))
    throw ChecksumError(what + ": blob checksum mismatch");

  auto config = model_config_from_json(m.at("config"));
  auto model = std::make_unique<MactnModel>(config, field<std::uint64_t>(m, "seed", what));

  struct Entry {
    Shape shape;
    std::size_t offset, count;
  };
  std::map<std::pair<std::string, std::string>, Entry> entries;
  for (auto &a : field<json>(m, "arrays", what)) {
    Entry e{field<Shape>(a, "shape", what), field<std::size_t>(a, "offset", what), field<std::size_t>(a, "count", what)};
    if (e.count != shape_numel(e.shape) || e.offset > declared / 8 || e.count > declared / 8 - e.offset)
      throw ManifestError(what + ": array '" + field<std::string>(a, "name", what) + "' lies outside the blob");
    entries[{field<std::string>(a, "role", what), field<std::string>(a, "name", what)}] = e;
  }
  auto fetch = [&](const std::string &role, const std::string &name, const Shape &shape, std::span<double> dst) {
    auto it = entries.find({role, name});
    if (it == entries.end()) throw ManifestError(what + ": missing " + role + " '" + name + "'");
    if (it->second.shape != shape)
      throw DimensionError(what + ": " + role + " '" + name + "' has shape " + shape_str(it->second.shape) +
                           ", model expects " + shape_str(shape));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = get_f64(blob.data() + 8 * (it->second.offset + i));
    entries.erase(it);
  };
  auto &store = model->parameters();
  for (auto &[name, t] : store.parameters()) {
    Tensor h = t;
    fetch("parameter", name, h.shape(), h.mutable_data());
  }
  for (auto &[name, t] : store.buffers()) {
    Tensor h = t;
    fetch("buffer", name, h.shape(), h.mutable_data());
  }
  if (opt && m.contains("optimizer_step")) {
    *opt = AdamWState{};
    opt->step = field<std::uint64_t>(m, "optimizer_step", what);
    for (auto &[name, t] : store.parameters()) {
      opt->m.emplace_back(t.numel());
      opt->v.emplace_back(t.numel());
      fetch("adam_m", name, t.shape(), opt->m.back());
      fetch("adam_v", name, t.shape(), opt->v.back());
    }
  }
  for (auto &[key, e] : entries)
    if (key.first == "parameter" || key.first == "buffer")
      throw ManifestError(what + ": array '" + key.second + "' does not belong to the model");
  return model;
}

} // namespace mactn
