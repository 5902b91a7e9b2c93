#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mactn/data_io.hpp"
#include "mactn/explain.hpp"
#include "mactn/train.hpp"

namespace mactn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Error categories

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] void missing(const std::string &what) { throw MissingFileError(what); }

void require_dir(const std::string &path, const std::string &flag) {
  if (path.empty()) throw UsageError(flag + " is required");
  if (!fs::is_directory(path)) missing(flag + ": no such directory '" + path + "'");
}

// ---------------------------------------------------------------------------
// Config <-> JSON for the pieces only the CLI needs to serialize

json pipeline_to_json(const PipelineConfig &c) {
  return json{{"profile", c.profile},
              {"montage", c.montage.pairs},
              {"channel_select", c.channel_select},
              {"window_s", c.window.window_s},
              {"step_s", c.window.step_s},
              {"notch", c.notch.enabled},
              {"notch_low", c.notch.low_hz},
              {"notch_high", c.notch.high_hz},
              {"bandpass", c.bandpass.enabled},
              {"bandpass_low", c.bandpass.low_hz},
              {"bandpass_high", c.bandpass.high_hz},
              {"filter_order", c.filter_order},
              {"target_rate", c.target_rate},
              {"zscore", c.zscore},
              {"zscore_eps", c.zscore_eps}};
}

PipelineConfig pipeline_from_json(const json &j) {
  PipelineConfig c;
  j.at("profile").get_to(c.profile);
  j.at("montage").get_to(c.montage.pairs);
  j.at("channel_select").get_to(c.channel_select);
  j.at("window_s").get_to(c.window.window_s);
  j.at("step_s").get_to(c.window.step_s);
  j.at("notch").get_to(c.notch.enabled);
  j.at("notch_low").get_to(c.notch.low_hz);
  j.at("notch_high").get_to(c.notch.high_hz);
  j.at("bandpass").get_to(c.bandpass.enabled);
  j.at("bandpass_low").get_to(c.bandpass.low_hz);
  j.at("bandpass_high").get_to(c.bandpass.high_hz);
  j.at("filter_order").get_to(c.filter_order);
  j.at("target_rate").get_to(c.target_rate);
  j.at("zscore").get_to(c.zscore);
  j.at("zscore_eps").get_to(c.zscore_eps);
  c.window.validate();
  return c;
}

json synth_to_json(const SynthProfile &p) {
  json classes = json::array();
  for (const auto &c : p.classes)
    classes.push_back({{"center_hz", c.center_hz}, {"bandwidth_hz", c.bandwidth_hz}, {"amplitude", c.amplitude}});
  return json{{"n_subjects", p.n_subjects},
              {"n_channels", p.n_channels},
              {"n_trials_per_class", p.n_trials_per_class},
              {"trial_len_s", p.trial_len_s},
              {"sample_rate", p.sample_rate},
              {"subject_variability", p.subject_variability},
              {"noise_level", p.noise_level},
              {"line_noise", p.line_noise},
              {"classes", classes}};
}

SynthProfile synth_from_json(const json &j) {
  SynthProfile p;
  j.at("n_subjects").get_to(p.n_subjects);
  j.at("n_channels").get_to(p.n_channels);
  j.at("n_trials_per_class").get_to(p.n_trials_per_class);
  j.at("trial_len_s").get_to(p.trial_len_s);
  j.at("sample_rate").get_to(p.sample_rate);
  j.at("subject_variability").get_to(p.subject_variability);
  j.at("noise_level").get_to(p.noise_level);
  j.at("line_noise").get_to(p.line_noise);
  p.classes.clear();
  for (const auto &c : j.at("classes"))
    p.classes.push_back({c.at("center_hz").get<double>(), c.at("bandwidth_hz").get<double>(),
                         c.at("amplitude").get<double>()});
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// --set key=value

struct Overrides {
  std::map<std::string, std::map<std::string, json>> by_section; // section -> key -> value

  static Overrides parse(const std::vector<std::string> &sets, const std::set<std::string> &sections) {
    Overrides o;
    for (const auto &s : sets) {
      const auto eq = s.find('='), dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw UsageError("--set expects section.key=value, got '" + s + "'");
      const std::string section = s.substr(0, dot), key = s.substr(dot + 1, eq - dot - 1), text = s.substr(eq + 1);
      if (!sections.count(section)) {
        std::string known;
        for (const auto &k : sections) known += (known.empty() ? "" : ", ") + k;
        throw UsageError("--set: unknown section '" + section + "' (this command accepts: " + known + ")");
      }
      json value = json::parse(text, nullptr, false);
      if (value.is_discarded()) value = text;
      o.by_section[section][key] = value;
    }
    return o;
  }

  // Merges overrides for `section` into `target`; every key must already exist.
  template <typename FromJson> auto apply(const std::string &section, json target, FromJson from_json) const {
    if (auto it = by_section.find(section); it != by_section.end())
      for (const auto &[key, value] : it->second) {
        if (!target.contains(key)) throw UsageError("--set: unknown key '" + section + "." + key + "'");
        target[key] = value;
      }
    try {
      return from_json(target);
    } catch (const json::exception &e) {
      throw UsageError("--set: bad value in section '" + section + "': " + e.what());
    } catch (const DataError &e) {
      throw UsageError(std::string("--set: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Run directories

struct RunDir {
  fs::path path;
  json record;

  void write_record() const {
    std::ofstream out(path / "run_config.json");
    out << record.dump(2) << "\n";
  }
};

RunDir make_run_dir(const std::string &command, const std::string &out_root, const std::string &run_dir,
                    const std::vector<std::string> &args, std::uint64_t seed) {
  RunDir r;
  if (!run_dir.empty()) {
    r.path = run_dir;
  } else {
    std::string root = out_root;
    if (root.empty()) {
      const char *env = std::getenv("MACTN_OUTPUT_ROOT");
      root = env && *env ? env : "runs";
    }
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream stamp;
    stamp << command << "_" << std::put_time(&tm, "%Y%m%d_%H%M%S");
    r.path = fs::path(root) / stamp.str();
    for (int k = 2; fs::exists(r.path); ++k) r.path = fs::path(root) / (stamp.str() + "_" + std::to_string(k));
  }
  fs::create_directories(r.path);
  r.record = {{"command", command}, {"args", args}, {"seed", seed}, {"version", MACTN_VERSION}};
  return r;
}

// ---------------------------------------------------------------------------
// Helpers

std::vector<std::size_t> parse_index_list(const std::string &text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception &) {
      pos = 0;
    }
    if (pos != item.size()) throw UsageError("expected a comma-separated list of indices, got '" + text + "'");
    out.push_back(v);
  }
  return out;
}

// Least-squares line fit; returns R^2.
double linear_r2(const std::vector<double> &x, const std::vector<double> &y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx), icpt = (sy - slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ss_res += std::pow(y[i] - (slope * x[i] + icpt), 2);
    ss_tot += std::pow(y[i] - sy / n, 2);
  }
  return ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
}

ModelConfig model_profile(const std::string &name) {
  if (name == "thu_ep") return ModelConfig::thu_ep();
  if (name == "deap") return ModelConfig::deap();
  throw UsageError("unknown model profile '" + name + "' (expected thu_ep, deap or miniature)");
}

const std::vector<double> kSynthCenters{6, 10, 20, 30, 14, 25, 35, 40, 4};

struct TrainFlags {
  TrainConfig cfg;
  void add(CLI::App &app) {
    app.add_option("--lr", cfg.lr, "Initial learning rate")->capture_default_str();
    app.add_option("--weight-decay", cfg.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "Mini-batch size")->capture_default_str();
    app.add_option("--epochs", cfg.max_epochs, "Maximum epochs")->capture_default_str();
    app.add_option("--flooding-b", cfg.flooding_b, "Flooding level b (0 disables)")->capture_default_str();
    app.add_option("--plateau-patience", cfg.plateau_patience, "Epochs without improvement before LR decay")
        ->capture_default_str();
    app.add_option("--plateau-factor", cfg.plateau_factor, "LR decay factor")->capture_default_str();
    app.add_option("--early-stop-patience", cfg.early_stop_patience, "Epochs without improvement before stopping")
        ->capture_default_str();
  }
};

} // namespace

std::vector<double> parse_range(const std::string &text) {
  auto num = [&](const std::string &s) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception &) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw UsageError("bad number '" + s + "' in range '" + text + "'");
    return v;
  };
  std::vector<double> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const auto colon = text.find(':', dots);
    const double a = num(text.substr(0, dots));
    const double b = num(text.substr(dots + 2, colon == std::string::npos ? std::string::npos : colon - dots - 2));
    const double step = colon == std::string::npos ? 1.0 : num(text.substr(colon + 1));
    if (!(step > 0) || b < a) throw UsageError("range '" + text + "' must be start..end:step with end >= start, step > 0");
    for (std::size_t i = 0;; ++i) {
      const double v = a + step * static_cast<double>(i);
      if (v > b + 1e-9 * step) break;
      out.push_back(v);
    }
  } else {
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(num(item));
  }
  if (out.empty()) throw UsageError("empty range '" + text + "'");
  return out;
}

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"MACTN EEG emotion recognition pipeline", "mactn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MACTN_VERSION);

  std::string out_root, run_dir;
  std::uint64_t seed = 0;
  std::vector<std::string> sets;
  auto common = [&](CLI::App *sub) {
    sub->add_option("--out", out_root, "Output root (default $MACTN_OUTPUT_ROOT or ./runs); a timestamped run directory is created inside");
    sub->add_option("--run-dir", run_dir, "Exact run directory (overrides --out)");
    sub->add_option("--seed", seed, "Random seed")->capture_default_str();
  };
  auto set_option = [&](CLI::App *sub, const std::string &sections) {
    sub->add_option("--set", sets, "Override a config key, section.key=value (sections: " + sections + ")");
  };

  // synth
  auto *synth = app.add_subcommand("synth", "Generate synthetic multi-subject EEG bundles");
  SynthProfile sp;
  std::size_t n_classes = 3;
  double snr_db = NAN;
  common(synth);
  set_option(synth, "synth");
  synth->add_option("--subjects", sp.n_subjects, "Number of subjects")->capture_default_str();
  synth->add_option("--classes", n_classes, "Number of classes (band centres 6, 10, 20, 30, 14, 25, 35, 40, 4 Hz)")
      ->capture_default_str()
      ->check(CLI::Range(1, 9));
  synth->add_option("--channels", sp.n_channels, "Channels per subject")->capture_default_str();
  synth->add_option("--trials-per-class", sp.n_trials_per_class, "Trials per class and subject")->capture_default_str();
  synth->add_option("--trial-len-s", sp.trial_len_s, "Trial length in seconds")->capture_default_str();
  synth->add_option("--rate", sp.sample_rate, "Sample rate in Hz")->capture_default_str();
  synth->add_option("--snr-db", snr_db, "Class-signal to background RMS ratio in dB (default: amplitude 1, i.e. 0 dB)");
  synth->add_option("--variability", sp.subject_variability, "Spread of per-subject channel gains")
      ->capture_default_str();
  synth->add_option("--line-noise", sp.line_noise, "Amplitude of a 50 Hz component")->capture_default_str();

  // preprocess
  auto *prep = app.add_subcommand("preprocess", "Montage, segmentation, filtering, resampling and z-scoring");
  std::string input, prep_profile = "thu_ep", deap_dimension;
  common(prep);
  set_option(prep, "pipeline");
  prep->add_option("--input", input, "Directory of raw bundles (one subdirectory per subject)");
  prep->add_option("--profile", prep_profile, "thu_ep (14 s/4 s, 30 bipolar pairs), deap (12 s/4 s, 28 channels) or custom")
      ->capture_default_str();
  prep->add_option("--deap-labels", deap_dimension, "Binarize 'arousal' or 'valence' ratings at 5 into labels");

  // train
  auto *tr = app.add_subcommand("train", "Cross-validated training");
  std::string data_dir, model_name = "thu_ep", scheme_name = "csv10", folds_text;
  std::size_t workers = 1;
  double val_fraction = -1;
  TrainFlags tf;
  common(tr);
  set_option(tr, "model, train");
  tr->add_option("--data", data_dir, "Directory of segment bundles");
  tr->add_option("--profile", model_name, "Model profile: thu_ep, deap, or miniature (sized from the data)")
      ->capture_default_str();
  tr->add_option("--scheme", scheme_name, "csv10, loso, loto or ctv10")->capture_default_str();
  tr->add_option("--workers", workers, "Folds trained in parallel")->capture_default_str();
  tr->add_option("--folds", folds_text, "Comma-separated fold indices to run (default: all)");
  tr->add_option("--val-fraction", val_fraction, "Validation share (default: loso/ctv10 0.2, csv10/loto 0)");
  tf.add(*tr);

  // eval
  auto *ev = app.add_subcommand("eval", "Evaluate a checkpoint on segment bundles");
  std::string checkpoint, subjects_text;
  common(ev);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory");
  ev->add_option("--data", data_dir, "Directory of segment bundles");
  ev->add_option("--subjects", subjects_text, "Comma-separated subject ids (default: all)");

  // explain
  auto *ex = app.add_subcommand("explain", "Attention, kernel and feature exports");
  std::string kind = "all", segment, stage = "post_gtfe";
  std::size_t max_samples = 256;
  common(ex);
  ex->add_option("--checkpoint", checkpoint, "Checkpoint directory");
  ex->add_option("--data", data_dir, "Directory of segment bundles");
  ex->add_option("--kind", kind, "channel, self, kernels, features or all")->capture_default_str();
  ex->add_option("--segment", segment, "Segment key subject/segment for the self-attention trace (default: first)");
  ex->add_option("--stage", stage, "Feature stage: post_ltfe or post_gtfe")->capture_default_str();
  ex->add_option("--max-samples", max_samples, "Samples used for channel attention and features")
      ->capture_default_str();

  // flops
  auto *fl = app.add_subcommand("flops", "FLOP count versus window length");
  std::string flops_profile = "thu_ep", windows = "4..18:2";
  double rate = 125.0;
  common(fl);
  set_option(fl, "model");
  fl->add_option("--profile", flops_profile, "thu_ep or deap")->capture_default_str();
  fl->add_option("--window-s", windows, "Window lengths, start..end:step or a list")->capture_default_str();
  fl->add_option("--rate", rate, "Sample rate in Hz")->capture_default_str();

  // splits
  auto *sl = app.add_subcommand("splits", "Print a cross-validation plan");
  std::size_t n_ids = 0;
  common(sl);
  sl->add_option("--scheme", scheme_name, "csv10, loso, loto or ctv10")->capture_default_str();
  sl->add_option("--ids", n_ids, "Number of synthetic ids (instead of --data)");
  sl->add_option("--data", data_dir, "Directory of segment bundles to take ids from");
  sl->add_option("--val-fraction", val_fraction, "Validation share (default per scheme)");

  std::vector<std::string> argv_store{"mactn"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char *> argv;
  for (auto &a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    // ------------------------------------------------------------------ synth
    if (*synth) {
      auto ov = Overrides::parse(sets, {"synth"});
      sp.classes.clear();
      for (std::size_t c = 0; c < n_classes; ++c) sp.classes.push_back({kSynthCenters[c], 2.0, 1.0});
      if (!std::isnan(snr_db)) sp.set_snr_db(snr_db);
      sp = ov.apply("synth", synth_to_json(sp), synth_from_json);
      auto rd = make_run_dir("synth", out_root, run_dir, args, seed);
      const auto bundles = synth_generate(sp, seed);
      for (const auto &b : bundles) write_bundle(b, (rd.path / "data" / b.subject_id).string());
      rd.record["synth"] = synth_to_json(sp);
      rd.write_record();
      out << "wrote " << bundles.size() << " subjects x " << bundles.front().trials.size() << " trials to "
          << (rd.path / "data").string() << "\n";
      return kOk;
    }

    // ------------------------------------------------------------- preprocess
    if (*prep) {
      auto ov = Overrides::parse(sets, {"pipeline"});
      PipelineConfig pc;
      try {
        pc = PipelineConfig::by_name(prep_profile);
      } catch (const ConfigError &e) {
        throw UsageError(e.what());
      }
      pc = ov.apply("pipeline", pipeline_to_json(pc), pipeline_from_json);
      require_dir(input, "--input");
      auto raw = load_bundles(input);
      auto rd = make_run_dir("preprocess", out_root, run_dir, args, seed);
      std::size_t n_segments = 0;
      std::vector<std::string> warnings;
      for (auto &b : raw) {
        if (!deap_dimension.empty()) binarize_deap_labels(b, deap_dimension);
        auto seg = preprocess_bundle(b, pc, &warnings);
        n_segments += seg.trials.size();
        write_bundle(seg, (rd.path / "segments" / seg.subject_id).string());
      }
      for (const auto &w : warnings) err << "warning: " << w << "\n";
      rd.record["pipeline"] = pipeline_to_json(pc);
      rd.record["input"] = input;
      rd.record["warnings"] = warnings;
      rd.write_record();
      out << "wrote " << n_segments << " segments from " << raw.size() << " subjects to "
          << (rd.path / "segments").string() << "\n";
      return kOk;
    }

    // ------------------------------------------------------------------ train
    if (*tr) {
      auto ov = Overrides::parse(sets, {"model", "train"});
      const Scheme scheme = [&] {
        try {
          return scheme_from_string(scheme_name);
        } catch (const ConfigError &e) {
          throw UsageError(e.what());
        }
      }();
      if (model_name != "miniature") (void)model_profile(model_name);
      tf.cfg.seed = seed;
      const TrainConfig tc = ov.apply("train", to_json(tf.cfg), train_config_from_json);
      require_dir(data_dir, "--data");
      const auto data = Dataset::from_bundles(load_bundles(data_dir));
      ModelConfig base = model_name == "miniature"
                             ? ModelConfig::miniature(data.n_channels(), data.n_samples(), data.n_classes())
                             : model_profile(model_name);
      const ModelConfig mc = ov.apply("model", to_json(base), model_config_from_json);
      mc.validate();
      if (mc.n_channels != data.n_channels() || mc.input_len != data.n_samples())
        throw UsageError("segments are (" + std::to_string(data.n_channels()) + ", " + std::to_string(data.n_samples()) +
                         ") but the " + model_name + " model expects (" + std::to_string(mc.n_channels) + ", " +
                         std::to_string(mc.input_len) + "); use --profile miniature or --set model.n_channels/input_len");

      SplitParams params;
      params.val_fraction = val_fraction;
      const auto ids = scheme == Scheme::Csv10 || scheme == Scheme::Loso ? data.subjects() : data.source_trials();
      const auto plan = make_splits(scheme, ids, seed, params);

      auto rd = make_run_dir("train", out_root, run_dir, args, seed);
      rd.record["model"] = to_json(mc);
      rd.record["train"] = to_json(tc);
      rd.record["scheme"] = scheme_name;
      rd.record["val_fraction"] = val_fraction < 0 ? default_val_fraction(scheme) : val_fraction;
      rd.record["data"] = data_dir;
      rd.record["workers"] = workers;
      rd.write_record();

      CvOptions opts;
      opts.workers = workers;
      opts.fold_subset = parse_index_list(folds_text);
      opts.on_trained = [&](std::size_t f, MactnModel &model) {
        save_checkpoint((rd.path / ("fold_" + std::to_string(f))).string(), model);
      };
      const auto report = run_cross_validation(data, plan, mc, tc, opts);
      for (const auto &r : report.folds) {
        std::ofstream h(rd.path / ("fold_" + std::to_string(r.fold)) / "history.txt");
        h << format_history(r.history);
      }
      const auto table = format_report(report);
      std::ofstream(rd.path / "report.txt") << table;
      std::ofstream(rd.path / "report.json") << to_json(report).dump(2) << "\n";
      out << table << "run directory: " << rd.path.string() << "\n";
      return kOk;
    }

    // ------------------------------------------------------------------- eval
    if (*ev) {
      require_dir(checkpoint, "--checkpoint");
      require_dir(data_dir, "--data");
      auto model = load_checkpoint(checkpoint);
      auto bundles = load_bundles(data_dir);
      if (!subjects_text.empty()) {
        std::set<std::string> keep;
        std::stringstream ss(subjects_text);
        for (std::string s; std::getline(ss, s, ',');) keep.insert(s);
        std::erase_if(bundles, [&](const EegBundle &b) { return !keep.count(b.subject_id); });
        if (bundles.empty()) missing("--subjects: none of the listed subjects exist in '" + data_dir + "'");
      }
      const auto data = Dataset::from_bundles(bundles);
      std::vector<std::size_t> idx(data.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      const auto m = evaluate(*model, data, idx);
      auto rd = make_run_dir("eval", out_root, run_dir, args, seed);
      rd.record["checkpoint"] = checkpoint;
      rd.record["data"] = data_dir;
      rd.write_record();
      const json j{{"n", m.n},
                   {"accuracy", m.accuracy},
                   {"macro_f1", m.macro_f1},
                   {"per_class_f1", m.per_class_f1},
                   {"confusion", m.confusion}};
      std::ofstream(rd.path / "metrics.json") << j.dump(2) << "\n";
      char line[128];
      std::snprintf(line, sizeof line, "n %zu  ACC %.1f%%  F1 %.1f%%\n", m.n, 100 * m.accuracy, 100 * m.macro_f1);
      out << line;
      return kOk;
    }

    // ---------------------------------------------------------------- explain
    if (*ex) {
      static const std::set<std::string> kinds{"all", "channel", "self", "kernels", "features"};
      if (!kinds.count(kind)) throw UsageError("--kind must be one of channel, self, kernels, features, all");
      FeatureStage fstage;
      try {
        fstage = feature_stage_from_string(stage);
      } catch (const ConfigError &e) {
        throw UsageError(e.what());
      }
      require_dir(checkpoint, "--checkpoint");
      require_dir(data_dir, "--data");
      auto model = load_checkpoint(checkpoint);
      auto bundles = load_bundles(data_dir);
      const auto data = Dataset::from_bundles(bundles);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < data.size() && i < max_samples; ++i) idx.push_back(i);
      auto rd = make_run_dir("explain", out_root, run_dir, args, seed);
      rd.record["checkpoint"] = checkpoint;
      rd.record["data"] = data_dir;
      rd.write_record();
      const auto &mc = model->config();
      auto path = [&](const std::string &k, const std::string &id, const std::string &ext) {
        return (rd.path / explain_filename(k, id, ext)).string();
      };
      if ((kind == "all" || kind == "channel") && mc.use_ltfe && mc.use_sk_attention) {
        auto att = extract_channel_attention(*model, data, idx, bundles.front().channel_names);
        write_channel_attention_csv(att, path("channel", "all", "csv"));
        write_channel_attention_svg(att, path("channel", "all", "svg"));
        out << "channel attention over " << idx.size() << " samples\n";
      }
      if ((kind == "all" || kind == "self") && mc.use_gtfe) {
        std::size_t pick = 0;
        if (!segment.empty()) {
          pick = data.size();
          for (std::size_t i = 0; i < data.size(); ++i)
            if (data.info(i).key() == segment) pick = i;
          if (pick == data.size()) missing("--segment: no segment '" + segment + "'");
        }
        const Tensor seg = reshape(data.batch(std::vector<std::size_t>{pick}), {data.n_channels(), data.n_samples()});
        auto trace = extract_self_attention(*model, seg, data.sample_rate());
        write_self_attention_csv(trace, path("selfattn", data.info(pick).key(), "csv"));
        write_self_attention_svg(trace, path("selfattn", data.info(pick).key(), "svg"));
        out << "self-attention trace for " << data.info(pick).key() << " (" << trace.raw.size() << " tokens)\n";
      }
      if ((kind == "all" || kind == "kernels") && mc.use_ltfe && mc.use_depth_block) {
        auto set = compose_layers(*model, "depth.conv1", "depth.conv2", data.sample_rate());
        write_kernels_csv(set, path("kernels", "depth", "csv"));
        out << "composed kernels: " << set.length << " taps, " << set.window_s << " s\n";
      }
      if (kind == "all" || kind == "features") {
        auto table = export_features(*model, data, idx, fstage);
        write_feature_csv(table, path("features", stage, "csv"));
        out << "features " << stage << ": " << table.ids.size() << " x " << table.width << "\n";
      }
      return kOk;
    }

    // ------------------------------------------------------------------ flops
    if (*fl) {
      auto ov = Overrides::parse(sets, {"model"});
      const ModelConfig base = model_profile(flops_profile);
      const auto win = parse_range(windows);
      if (!(rate > 0)) throw UsageError("--rate must be positive");
      auto rd = make_run_dir("flops", out_root, run_dir, args, seed);
      std::ostringstream csv, table;
      csv << "window_s,input_len,d_seq,conv,linear,attention,total\n";
      char line[160];
      std::snprintf(line, sizeof line, "%9s %9s %6s %14s %14s %14s %14s\n", "window_s", "input_len", "d_seq", "conv",
                    "linear", "attention", "total");
      table << line;
      std::vector<double> xs, ys;
      for (double w : win) {
        json j = to_json(base);
        j["input_len"] = static_cast<std::size_t>(std::llround(w * rate));
        const ModelConfig mc = ov.apply("model", j, model_config_from_json);
        try {
          mc.validate();
        } catch (const ConfigError &e) {
          throw UsageError("window " + std::to_string(w) + " s: " + e.what());
        }
        const auto f = count_flops(mc);
        std::snprintf(line, sizeof line, "%9g %9zu %6zu %14llu %14llu %14llu %14llu\n", w, mc.input_len, mc.seq_len(),
                      static_cast<unsigned long long>(f.conv), static_cast<unsigned long long>(f.linear),
                      static_cast<unsigned long long>(f.attention), static_cast<unsigned long long>(f.total()));
        table << line;
        csv << w << ',' << mc.input_len << ',' << mc.seq_len() << ',' << f.conv << ',' << f.linear << ','
            << f.attention << ',' << f.total() << '\n';
        xs.push_back(w);
        ys.push_back(static_cast<double>(f.total()));
      }
      bool monotone = true;
      for (std::size_t i = 1; i < ys.size(); ++i) monotone = monotone && ys[i] > ys[i - 1];
      const double r2 = xs.size() >= 2 ? linear_r2(xs, ys) : 1.0;
      table << "monotone " << (monotone ? "yes" : "no") << ", linear fit R^2 " << std::setprecision(6) << r2 << "\n";
      std::ofstream(rd.path / "flops.csv") << csv.str();
      rd.record["model"] = to_json(base);
      rd.record["windows_s"] = win;
      rd.record["rate"] = rate;
      rd.write_record();
      out << table.str();
      return kOk;
    }

    // ----------------------------------------------------------------- splits
    if (*sl) {
      const Scheme scheme = [&] {
        try {
          return scheme_from_string(scheme_name);
        } catch (const ConfigError &e) {
          throw UsageError(e.what());
        }
      }();
      std::vector<std::string> ids;
      if (!data_dir.empty()) {
        require_dir(data_dir, "--data");
        const auto data = Dataset::from_bundles(load_bundles(data_dir));
        ids = scheme == Scheme::Csv10 || scheme == Scheme::Loso ? data.subjects() : data.source_trials();
      } else {
        if (n_ids == 0) throw UsageError("splits needs --ids N or --data DIR");
        for (std::size_t i = 0; i < n_ids; ++i) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%s%03zu", scheme == Scheme::Csv10 || scheme == Scheme::Loso ? "s" : "t", i);
          ids.push_back(buf);
        }
      }
      SplitParams params;
      params.val_fraction = val_fraction;
      SplitPlan plan;
      try {
        plan = make_splits(scheme, ids, seed, params);
      } catch (const ConfigError &e) {
        throw UsageError(e.what());
      }
      auto rd = make_run_dir("splits", out_root, run_dir, args, seed);
      json folds = json::array();
      char line[160];
      std::snprintf(line, sizeof line, "%-5s %6s %6s %6s  %s\n", "fold", "train", "val", "test", "test ids");
      out << "scheme " << scheme_name << ", " << ids.size() << " ids, " << plan.folds.size() << " folds\n" << line;
      for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        const auto &fo = plan.folds[f];
        std::string t;
        for (const auto &id : fo.test) t += (t.empty() ? "" : ",") + id;
        std::snprintf(line, sizeof line, "%-5zu %6zu %6zu %6zu  ", f, fo.train.size(), fo.val.size(), fo.test.size());
        out << line << t << "\n";
        folds.push_back({{"train", fo.train}, {"val", fo.val}, {"test", fo.test}});
      }
      if (plan.segment_val_fraction > 0)
        out << "validation: " << plan.segment_val_fraction << " of the training trials' segments\n";
      std::ofstream(rd.path / "splits.json")
          << json{{"scheme", scheme_name}, {"segment_val_fraction", plan.segment_val_fraction}, {"folds", folds}}.dump(2)
          << "\n";
      rd.write_record();
      return kOk;
    }
  } catch (const UsageError &e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError &e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError &e) {
    err << "input error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const std::exception &e) {
    err << "internal error: " << e.what() << "\n";
    return kInvariant;
  }
  return kOk;
}

} // namespace mactn::cli
