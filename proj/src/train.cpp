#include "mactn/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "mactn/random.hpp"

namespace mactn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Loss

namespace {

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t n_classes) {
  if (labels.size() != batch)
    throw DimensionError("cross-entropy: " + std::to_string(labels.size()) + " labels for a batch of " +
                         std::to_string(batch));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
      throw ContractError("cross-entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                          " is outside [0, " + std::to_string(n_classes) + ")");
}

// Row-wise softmax into `probs`, returns mean CE.
double softmax_ce(std::span<const double> z, std::size_t n_classes, std::span<const int> labels,
                  std::vector<double> *probs) {
  const std::size_t batch = labels.size();
  if (probs) probs->resize(z.size());
  double total = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double *row = z.data() + i * n_classes;
    const double mx = *std::max_element(row, row + n_classes);
    double s = 0;
    for (std::size_t c = 0; c < n_classes; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[labels[i]];
    if (probs)
      for (std::size_t c = 0; c < n_classes; ++c) (*probs)[i * n_classes + c] = std::exp(row[c] - lse);
  }
  return total / static_cast<double>(batch);
}

} // namespace

double cross_entropy_value(std::span<const double> logits, std::size_t n_classes, std::span<const int> labels) {
  if (n_classes == 0 || logits.size() % n_classes) throw DimensionError("cross-entropy: logits do not divide into rows");
  check_labels(labels, logits.size() / n_classes, n_classes);
  if (labels.empty()) throw EmptyReductionError("cross-entropy: empty batch");
  return softmax_ce(logits, n_classes, labels, nullptr);
}

FloodedLoss flooding_cross_entropy(const Tensor &logits, std::span<const int> labels, double b) {
  if (logits.dim() != 2) throw DimensionError("flooding_cross_entropy: logits must be [B, classes], got " +
                                              shape_str(logits.shape()));
  const std::size_t batch = logits.size(0), nc = logits.size(1);
  check_labels(labels, batch, nc);
  if (batch == 0) throw EmptyReductionError("flooding_cross_entropy: empty batch");
  if (!(b >= 0)) throw ConfigError("flooding_cross_entropy: b must be non-negative");

  auto probs = std::make_shared<std::vector<double>>();
  const double ce = softmax_ce(logits.data(), nc, labels, probs.get());
  const double flooded = std::abs(ce - b) + b;
  const double sign = ce >= b ? 1.0 : -1.0;
  std::vector<int> y(labels.begin(), labels.end());
  Tensor out = make_result({1}, {flooded}, {logits}, [logits, probs, y, sign, batch, nc](std::span<const double> g) {
    std::vector<double> dz(*probs);
    const double s = sign * g[0] / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      dz[i * nc + static_cast<std::size_t>(y[i])] -= 1.0;
      for (std::size_t c = 0; c < nc; ++c) dz[i * nc + c] *= s;
    }
    logits.accumulate_grad(dz);
  });
  return {out, ce};
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train: lr must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("train: max_epochs must be positive");
  if (plateau_patience == 0) throw ConfigError("train: plateau_patience must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("train: plateau_factor must lie in (0, 1)");
  if (!(flooding_b >= 0)) throw ConfigError("train: flooding_b must be non-negative");
  if (early_stop_patience == 0) throw ConfigError("train: early_stop_patience must be positive");
  if (!(min_delta >= 0)) throw ConfigError("train: min_delta must be non-negative");
}

json to_json(const TrainConfig &c) {
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"plateau_patience", c.plateau_patience},
              {"plateau_factor", c.plateau_factor},
              {"flooding_b", c.flooding_b},
              {"early_stop_patience", c.early_stop_patience},
              {"min_delta", c.min_delta},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json &j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  const json defaults = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw ConfigError("train config: unknown key '" + it.key() + "'");
  auto get = [&](const char *key, auto &dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const json::exception &e) {
      throw ConfigError(std::string("train config: bad value for '") + key + "': " + e.what());
    }
  };
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("max_epochs", c.max_epochs);
  get("plateau_patience", c.plateau_patience);
  get("plateau_factor", c.plateau_factor);
  get("flooding_b", c.flooding_b);
  get("early_stop_patience", c.early_stop_patience);
  get("min_delta", c.min_delta);
  get("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::from_bundles(const std::vector<EegBundle> &bundles) {
  Dataset d;
  std::set<std::string> keys;
  for (const auto &b : bundles) {
    b.validate();
    if (b.trials.empty()) continue;
    const std::size_t nch = b.channel_names.size();
    if (d.info_.empty() && d.n_channels_ == 0) {
      d.n_channels_ = nch;
      d.n_samples_ = b.trials.front().n_samples;
      d.sample_rate_ = b.sample_rate_hz;
    }
    if (nch != d.n_channels_ || b.sample_rate_hz != d.sample_rate_)
      throw DimensionError("dataset: subject '" + b.subject_id + "' has " + std::to_string(nch) + " channels at " +
                           std::to_string(b.sample_rate_hz) + " Hz, expected " + std::to_string(d.n_channels_) +
                           " at " + std::to_string(d.sample_rate_));
    d.n_classes_ = std::max(d.n_classes_, b.n_classes);
    for (const auto &t : b.trials) {
      if (t.n_samples != d.n_samples_)
        throw DimensionError("dataset: segment '" + b.subject_id + "/" + t.trial_id + "' has " +
                             std::to_string(t.n_samples) + " samples, expected " + std::to_string(d.n_samples_));
      if (t.label < 0)
        throw ContractError("dataset: segment '" + b.subject_id + "/" + t.trial_id + "' has no label");
      SegmentInfo info{b.subject_id, t.trial_id, t.source_trial.empty() ? t.trial_id : t.source_trial, t.label};
      if (!keys.insert(info.key()).second) throw ContractError("dataset: duplicate segment '" + info.key() + "'");
      d.n_classes_ = std::max(d.n_classes_, static_cast<std::size_t>(t.label) + 1);
      d.info_.push_back(std::move(info));
      d.values_.insert(d.values_.end(), t.data.begin(), t.data.end());
    }
  }
  if (d.info_.empty()) throw EmptyReductionError("dataset: no labelled segments");
  return d;
}

std::span<const double> Dataset::values(std::size_t i) const {
  const std::size_t len = n_channels_ * n_samples_;
  return std::span<const double>(values_).subspan(i * len, len);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t len = n_channels_ * n_samples_;
  std::vector<double> out;
  out.reserve(indices.size() * len);
  for (auto i : indices) {
    if (i >= size()) throw ContractError("dataset: index " + std::to_string(i) + " out of range");
    auto v = values(i);
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor({indices.size(), n_channels_, n_samples_}, std::move(out));
}

std::vector<int> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> y;
  y.reserve(indices.size());
  for (auto i : indices) y.push_back(info_.at(i).label);
  return y;
}

std::vector<std::string> Dataset::subjects() const {
  std::set<std::string> s;
  for (const auto &i : info_) s.insert(i.subject);
  return {s.begin(), s.end()};
}

std::vector<std::string> Dataset::source_trials() const {
  std::set<std::string> s;
  for (const auto &i : info_) s.insert(i.source_trial);
  return {s.begin(), s.end()};
}

FoldIndices resolve_fold(const Dataset &data, const SplitPlan &plan, std::size_t fold, std::uint64_t seed) {
  if (fold >= plan.folds.size()) throw ContractError("resolve_fold: fold index out of range");
  const Fold &f = plan.folds[fold];
  const std::set<std::string> tr(f.train.begin(), f.train.end()), va(f.val.begin(), f.val.end()),
      te(f.test.begin(), f.test.end());
  FoldIndices out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto &info = data.info(i);
    const std::string &id = plan.subject_level() ? info.subject : info.source_trial;
    if (te.count(id)) out.test.push_back(i);
    else if (va.count(id)) out.val.push_back(i);
    else if (tr.count(id)) out.train.push_back(i);
  }
  if (plan.segment_val_fraction > 0 && !out.train.empty()) {
    Rng rng(seed ^ (0x5851f42d4c957f2dULL * (fold + 1)));
    rng.shuffle(out.train);
    const auto n_val =
        static_cast<std::size_t>(std::llround(plan.segment_val_fraction * static_cast<double>(out.train.size())));
    out.val.insert(out.val.end(), out.train.begin(), out.train.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train.erase(out.train.begin(), out.train.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
  }
  return out;
}

void assert_no_leakage(const Dataset &data, std::span<const std::size_t> touched, std::span<const std::size_t> test,
                       bool subject_level) {
  std::set<std::string> test_keys, test_subjects, test_trials;
  for (auto i : test) {
    test_keys.insert(data.info(i).key());
    test_subjects.insert(data.info(i).subject);
    test_trials.insert(data.info(i).subject + "/" + data.info(i).source_trial);
  }
  for (auto i : touched) {
    const auto &info = data.info(i);
    if (test_keys.count(info.key())) throw ContractError("leakage: test segment '" + info.key() + "' used in training");
    if (subject_level && test_subjects.count(info.subject))
      throw ContractError("leakage: test subject '" + info.subject + "' used in training");
    if (!subject_level && test_trials.count(info.subject + "/" + info.source_trial))
      throw ContractError("leakage: test trial '" + info.subject + "/" + info.source_trial + "' used in training");
  }
}

// ---------------------------------------------------------------------------
// Training

bool EpochRecord::operator==(const EpochRecord &o) const {
  return epoch == o.epoch && train_loss == o.train_loss && train_ce == o.train_ce && val_loss == o.val_loss &&
         lr == o.lr && improved == o.improved;
}

bool History::operator==(const History &o) const {
  return epochs == o.epochs && best_epoch == o.best_epoch && stopped_early == o.stopped_early && steps == o.steps;
}

namespace {

void check_input(const MactnModel &model, const Dataset &data) {
  const auto &c = model.config();
  if (c.n_channels != data.n_channels() || c.input_len != data.n_samples())
    throw DimensionError("train: segments are (" + std::to_string(data.n_channels()) + ", " +
                         std::to_string(data.n_samples()) + "), model expects (" + std::to_string(c.n_channels) +
                         ", " + std::to_string(c.input_len) + ")");
  if (data.n_classes() > c.n_classes)
    throw DimensionError("train: data has " + std::to_string(data.n_classes()) + " classes, model head has " +
                         std::to_string(c.n_classes));
}

// Eval-mode mean CE over `idx`.
double eval_loss(MactnModel &model, const Dataset &data, std::span<const std::size_t> idx, std::size_t batch_size) {
  NoGradGuard guard;
  double total = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    auto ids = idx.subspan(start, std::min(batch_size, idx.size() - start));
    auto y = data.labels(ids);
    auto res = model.forward(data.batch(ids), Mode::Eval);
    total += cross_entropy_value(res.logits.data(), model.config().n_classes, y) * static_cast<double>(ids.size());
  }
  return total / static_cast<double>(idx.size());
}

} // namespace

TrainResult train(MactnModel &model, const Dataset &data, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const TrainConfig &config, const StepObserver &observer) {
  config.validate();
  check_input(model, data);
  if (train_idx.empty()) throw EmptyReductionError("train: empty training split");

  TrainResult result;
  {
    std::set<std::size_t> touched(train_idx.begin(), train_idx.end());
    touched.insert(val_idx.begin(), val_idx.end());
    result.touched.assign(touched.begin(), touched.end());
  }
  std::vector<Tensor> params;
  for (const auto &[_, t] : model.parameters().parameters()) params.push_back(t);

  AdamWConfig opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;
  PlateauScheduler scheduler{config.plateau_factor, config.plateau_patience, config.min_delta};
  EarlyStopping stopper{config.early_stop_patience, config.min_delta};
  Rng shuffle_rng(config.seed);
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  auto best = model.parameters().snapshot();
  History &h = result.history;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double sum_flooded = 0, sum_ce = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::span<const std::size_t> ids(order.data() + start, std::min(config.batch_size, order.size() - start));
      const auto y = data.labels(ids);
      model.parameters().zero_grad();
      auto res = model.forward(data.batch(ids), Mode::Train);
      auto loss = flooding_cross_entropy(res.logits, y, config.flooding_b);
      loss.loss.backward();
      adamw_step(params, result.optimizer, opt);
      ++h.steps;
      const double w = static_cast<double>(ids.size());
      sum_flooded += loss.loss.item() * w;
      sum_ce += loss.cross_entropy * w;
      if (observer) {
        StepRecord rec{epoch, h.steps, {res.logits.data().begin(), res.logits.data().end()}, y, loss.loss.item(),
                       loss.cross_entropy};
        observer(rec);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = sum_flooded / static_cast<double>(order.size());
    rec.train_ce = sum_ce / static_cast<double>(order.size());
    rec.val_loss = val_idx.empty() ? rec.train_ce : eval_loss(model, data, val_idx, std::max<std::size_t>(config.batch_size, 64));
    rec.lr = opt.lr;
    rec.improved = stopper.improved(rec.val_loss);
    if (rec.improved) {
      best = model.parameters().snapshot();
      h.best_epoch = epoch;
    }
    opt.lr = scheduler.step(rec.val_loss, opt.lr);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    h.epochs.push_back(rec);
    if (stopper.should_stop()) {
      h.stopped_early = epoch < config.max_epochs;
      break;
    }
  }
  model.parameters().restore(best);
  model.parameters().zero_grad();
  return result;
}

std::vector<int> predict(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                         std::size_t batch_size) {
  check_input(model, data);
  if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
  NoGradGuard guard;
  const std::size_t nc = model.config().n_classes;
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    auto ids = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto res = model.forward(data.batch(ids), Mode::Eval);
    auto z = res.logits.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double *row = z.data() + i * nc;
      out.push_back(static_cast<int>(std::max_element(row, row + nc) - row));
    }
  }
  return out;
}

Metrics evaluate(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                 std::size_t batch_size) {
  const auto pred = predict(model, data, indices, batch_size);
  const auto truth = data.labels(indices);
  return compute_metrics(truth, pred, model.config().n_classes);
}

// ---------------------------------------------------------------------------
// Cross-validation

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) {
  // splitmix64 of (seed, fold)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(fold) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

CvReport run_cross_validation(const Dataset &data, const SplitPlan &plan, const ModelConfig &model_config,
                              const TrainConfig &train_config, const CvOptions &options) {
  plan.validate();
  model_config.validate();
  train_config.validate();
  std::vector<std::size_t> folds = options.fold_subset;
  if (folds.empty()) {
    folds.resize(plan.folds.size());
    std::iota(folds.begin(), folds.end(), 0);
  }
  for (auto f : folds)
    if (f >= plan.folds.size()) throw ConfigError("cross-validation: fold " + std::to_string(f) + " does not exist");

  std::vector<FoldResult> results(folds.size());
  std::mutex observer_mutex;
  StepObserver observer;
  if (options.observer)
    observer = [&](const StepRecord &r) {
      std::lock_guard lock(observer_mutex);
      options.observer(r);
    };

  auto run_one = [&](std::size_t slot) {
    const std::size_t f = folds[slot];
    const auto idx = resolve_fold(data, plan, f, train_config.seed);
    if (idx.test.empty()) throw ContractError("cross-validation: fold " + std::to_string(f) + " has no test segments");
    MactnModel model(model_config, fold_seed(train_config.seed, f));
    TrainConfig tc = train_config;
    tc.seed = fold_seed(train_config.seed ^ 0xa5a5a5a5ULL, f);
    auto tr = train(model, data, idx.train, idx.val, tc, observer);
    assert_no_leakage(data, tr.touched, idx.test, plan.subject_level());
    FoldResult &r = results[slot];
    r.fold = f;
    r.ids = plan.folds[f];
    r.n_train = idx.train.size();
    r.n_val = idx.val.size();
    r.n_test = idx.test.size();
    r.test = evaluate(model, data, idx.test);
    r.history = std::move(tr.history);
    if (options.on_trained) {
      std::lock_guard lock(observer_mutex);
      options.on_trained(f, model);
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, folds.size()));
  if (workers == 1) {
    for (std::size_t s = 0; s < folds.size(); ++s) run_one(s);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s; (s = next.fetch_add(1)) < folds.size();) {
          try {
            run_one(s);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = folds.size();
          }
        }
      });
    for (auto &t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  CvReport report;
  report.scheme = to_string(plan.scheme);
  report.folds = std::move(results);
  std::sort(report.folds.begin(), report.folds.end(), [](const auto &a, const auto &b) { return a.fold < b.fold; });
  std::vector<double> acc, f1;
  for (const auto &r : report.folds) {
    acc.push_back(r.test.accuracy);
    f1.push_back(r.test.macro_f1);
  }
  report.accuracy = mean_std(acc);
  report.macro_f1 = mean_std(f1);
  return report;
}

namespace {

std::string join_ids(const std::vector<std::string> &ids, std::size_t max_shown = 4) {
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < max_shown; ++i) s += (i ? "," : "") + ids[i];
  if (ids.size() > max_shown) s += ",+" + std::to_string(ids.size() - max_shown);
  return s;
}

std::string fmt(const char *f, double a, double b = 0) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

} // namespace

std::string format_report(const CvReport &report) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-5s %-24s %7s %7s %7s %8s %8s\n", "fold", "test", "n_train", "n_val", "n_test",
                "ACC(%)", "F1(%)");
  os << "scheme " << report.scheme << "\n" << line;
  for (const auto &r : report.folds) {
    std::snprintf(line, sizeof line, "%-5zu %-24s %7zu %7zu %7zu %8.1f %8.1f\n", r.fold, join_ids(r.ids.test).c_str(),
                  r.n_train, r.n_val, r.n_test, 100 * r.test.accuracy, 100 * r.test.macro_f1);
    os << line;
  }
  os << "mean ± std  ACC " << fmt("%.1f ± %.1f", 100 * report.accuracy.mean, 100 * report.accuracy.std) << "  F1 "
     << fmt("%.1f ± %.1f", 100 * report.macro_f1.mean, 100 * report.macro_f1.std) << "\n";
  return os.str();
}

std::string format_history(const History &h) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%5s %12s %12s %12s %10s %4s %8s\n", "epoch", "train_loss", "train_ce", "val_loss",
                "lr", "best", "seconds");
  os << line;
  for (const auto &e : h.epochs) {
    std::snprintf(line, sizeof line, "%5zu %12.6f %12.6f %12.6f %10.3g %4s %8.2f\n", e.epoch, e.train_loss, e.train_ce,
                  e.val_loss, e.lr, e.improved ? "*" : "", e.seconds);
    os << line;
  }
  return os.str();
}

json to_json(const CvReport &report) {
  json folds = json::array();
  for (const auto &r : report.folds) {
    json epochs = json::array();
    for (const auto &e : r.history.epochs)
      epochs.push_back({{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"train_ce", e.train_ce},
                        {"val_loss", e.val_loss},
                        {"lr", e.lr},
                        {"improved", e.improved}});
    folds.push_back({{"fold", r.fold},
                     {"train", r.ids.train},
                     {"val", r.ids.val},
                     {"test", r.ids.test},
                     {"n_train", r.n_train},
                     {"n_val", r.n_val},
                     {"n_test", r.n_test},
                     {"accuracy", r.test.accuracy},
                     {"macro_f1", r.test.macro_f1},
                     {"per_class_f1", r.test.per_class_f1},
                     {"confusion", r.test.confusion},
                     {"best_epoch", r.history.best_epoch},
                     {"stopped_early", r.history.stopped_early},
                     {"steps", r.history.steps},
                     {"history", epochs}});
  }
  return json{{"scheme", report.scheme},
              {"folds", folds},
              {"accuracy", {{"mean", report.accuracy.mean}, {"std", report.accuracy.std}}},
              {"macro_f1", {{"mean", report.macro_f1.mean}, {"std", report.macro_f1.std}}}};
}

} // namespace mactn
