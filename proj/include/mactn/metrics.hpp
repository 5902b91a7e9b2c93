#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mactn {

struct Metrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  // confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

// Per-class F1 is 2PR/(P+R), taken as 0 when P+R = 0; macro F1 averages over
// all n_classes. Throws ContractError on a label outside [0, n_classes).
Metrics compute_metrics(std::span<const int> truth, std::span<const int> predicted, std::size_t n_classes);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0; // population (divide by n)
};
MeanStd mean_std(std::span<const double> values);

struct WilcoxonResult {
  double statistic = 0.0; // min(W+, W-)
  double p_value = 1.0;   // two-sided
  std::size_t n = 0;      // pairs left after dropping zero differences
  bool exact = false;
};

// Signed-rank test on paired samples. Zero differences are dropped and tied
// magnitudes get average ranks. n <= 25 uses the exact null distribution
// (with ties folded in), larger n the normal approximation with tie
// correction and no continuity correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

} // namespace mactn
