#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mactn/data_io.hpp"
#include "mactn/metrics.hpp"
#include "mactn/model.hpp"
#include "mactn/optim.hpp"
#include "mactn/splits.hpp"

namespace mactn {

// ---------------------------------------------------------------------------
// Loss

struct FloodedLoss {
  Tensor loss;            // |CE - b| + b, differentiable w.r.t. the logits
  double cross_entropy{}; // mean softmax cross-entropy before flooding
};

// logits [B, n_classes]. The gradient is that of CE when CE >= b and its
// negation when CE < b. b = 0 reduces to plain cross-entropy.
FloodedLoss flooding_cross_entropy(const Tensor &logits, std::span<const int> labels, double b);

// Mean softmax cross-entropy on raw values (no graph).
double cross_entropy_value(std::span<const double> logits, std::size_t n_classes, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t plateau_patience = 10;
  double plateau_factor = 0.1;
  double flooding_b = 1.3;
  std::size_t early_stop_patience = 15;
  double min_delta = 1e-4;
  std::uint64_t seed = 0;

  void validate() const; // throws ConfigError
};

nlohmann::json to_json(const TrainConfig &config);
TrainConfig train_config_from_json(const nlohmann::json &j);

// ---------------------------------------------------------------------------
// Dataset: equal-length labelled segments held in memory

struct SegmentInfo {
  std::string subject;
  std::string segment;      // trial id of the segment inside its bundle
  std::string source_trial; // trial the segment was cut from
  int label = -1;

  std::string key() const { return subject + "/" + segment; }
};

class Dataset {
public:
  // Every trial must carry a label and share channel count and length.
  static Dataset from_bundles(const std::vector<EegBundle> &bundles);

  std::size_t size() const { return info_.size(); }
  std::size_t n_channels() const { return n_channels_; }
  std::size_t n_samples() const { return n_samples_; }
  std::size_t n_classes() const { return n_classes_; }
  double sample_rate() const { return sample_rate_; }
  const SegmentInfo &info(std::size_t i) const { return info_.at(i); }
  std::span<const double> values(std::size_t i) const;

  // [B, channels, samples] in the given order.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> labels(std::span<const std::size_t> indices) const;

  std::vector<std::string> subjects() const;      // sorted, unique
  std::vector<std::string> source_trials() const; // sorted, unique

private:
  std::size_t n_channels_ = 0, n_samples_ = 0, n_classes_ = 0;
  double sample_rate_ = 0.0;
  std::vector<SegmentInfo> info_;
  std::vector<double> values_;
};

struct FoldIndices {
  std::vector<std::size_t> train, val, test;
};

// Maps a fold's ids onto dataset indices: by subject for subject-level
// schemes, by source trial otherwise. For ctv10 the training trials'
// segments are split into train/val with a seeded shuffle.
FoldIndices resolve_fold(const Dataset &data, const SplitPlan &plan, std::size_t fold, std::uint64_t seed);

// Throws ContractError when any segment touched during training shares a key
// (or, for subject-level plans, a subject) with the test set.
void assert_no_leakage(const Dataset &data, std::span<const std::size_t> touched, std::span<const std::size_t> test,
                       bool subject_level);

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0; // 1-based
  double train_loss = 0; // mean flooded loss over the epoch's batches (sample-weighted)
  double train_ce = 0;
  double val_loss = 0; // eval-mode CE on validation, or train_ce when there is none
  double lr = 0;       // learning rate used during the epoch
  bool improved = false;
  double seconds = 0; // wall time; excluded from equality

  bool operator==(const EpochRecord &o) const;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::uint64_t steps = 0;

  bool operator==(const History &o) const;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  std::vector<double> logits; // [B, n_classes] row-major
  std::vector<int> labels;
  double flooded_loss = 0;
  double cross_entropy = 0;
};

using StepObserver = std::function<void(const StepRecord &)>;

struct TrainResult {
  History history;
  AdamWState optimizer;
  std::vector<std::size_t> touched; // dataset indices read for training or validation
};

// Epoch loop: seeded shuffle, mini-batches, flooded CE, AdamW, plateau decay
// and early stopping on validation loss. On return the model holds the
// weights of the best epoch.
TrainResult train(MactnModel &model, const Dataset &data, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const TrainConfig &config, const StepObserver &observer = {});

std::vector<int> predict(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                         std::size_t batch_size = 64);
Metrics evaluate(MactnModel &model, const Dataset &data, std::span<const std::size_t> indices,
                 std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  std::size_t fold = 0;
  Fold ids;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  Metrics test;
  History history;
};

struct CvReport {
  std::string scheme;
  std::vector<FoldResult> folds; // ordered by fold index
  MeanStd accuracy, macro_f1;
};

struct CvOptions {
  std::size_t workers = 1;
  std::vector<std::size_t> fold_subset;    // empty = every fold
  StepObserver observer;                   // serialized across workers
  std::function<void(std::size_t, MactnModel &)> on_trained; // called per fold after training
};

// Per-fold model seed derived from the training seed.
std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold);

CvReport run_cross_validation(const Dataset &data, const SplitPlan &plan, const ModelConfig &model_config,
                              const TrainConfig &train_config, const CvOptions &options = {});

// One row per fold plus a mean ± std footer, values in percent.
std::string format_report(const CvReport &report);
// History tables, one row per epoch.
std::string format_history(const History &history);
// Everything except wall-clock timings, so equal runs give equal JSON.
nlohmann::json to_json(const CvReport &report);

} // namespace mactn
