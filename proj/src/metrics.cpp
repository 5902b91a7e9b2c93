#include "mactn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mactn/errors.hpp"

namespace mactn {

Metrics compute_metrics(std::span<const int> truth, std::span<const int> predicted, std::size_t n_classes) {
  if (truth.size() != predicted.size()) throw DimensionError("metrics: truth and predictions differ in length");
  if (n_classes == 0) throw ConfigError("metrics: n_classes must be positive");
  Metrics m;
  m.n = truth.size();
  m.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  const int nc = static_cast<int>(n_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= nc || predicted[i] < 0 || predicted[i] >= nc)
      throw ContractError("metrics: label outside [0, " + std::to_string(n_classes) + ") at index " +
                          std::to_string(i));
    ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    correct += truth[i] == predicted[i];
  }
  m.accuracy = m.n ? static_cast<double>(correct) / static_cast<double>(m.n) : 0.0;
  m.per_class_f1.assign(n_classes, 0.0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double tp = static_cast<double>(m.confusion[c][c]);
    double pred_c = 0, true_c = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
      pred_c += static_cast<double>(m.confusion[k][c]);
      true_c += static_cast<double>(m.confusion[c][k]);
    }
    const double p = pred_c > 0 ? tp / pred_c : 0.0;
    const double r = true_c > 0 ? tp / true_c : 0.0;
    m.per_class_f1[c] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  m.macro_f1 = std::accumulate(m.per_class_f1.begin(), m.per_class_f1.end(), 0.0) / static_cast<double>(n_classes);
  return m;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw EmptyReductionError("mean_std: no values");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] - a[i] != 0.0) d.push_back(b[i] - a[i]);
  if (d.empty()) throw ContractError("wilcoxon: all differences are zero");
  const std::size_t n = d.size();
  if (n < 5) throw ContractError("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(n));

  // Average ranks of |d|, kept doubled so ties stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<std::size_t> rank2(n);
  double tie_term = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const std::size_t r2 = i + j + 2; // 2 * average of 1-based ranks i+1 .. j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  std::size_t w_plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  const std::size_t t2 = std::min(w_plus2, total2 - w_plus2);

  WilcoxonResult r;
  r.n = n;
  r.statistic = static_cast<double>(t2) / 2.0;
  const double nd = static_cast<double>(n);
  if (n <= 25) {
    // count[s] = number of sign assignments whose doubled positive rank sum is s.
    std::vector<double> count(total2 + 1, 0.0);
    count[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = total2; s + 1 > rank2[i]; --s) count[s] += count[s - rank2[i]];
    double tail = 0;
    for (std::size_t s = 0; s <= t2; ++s) tail += count[s];
    r.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    r.exact = true;
  } else {
    const double mean = nd * (nd + 1) / 4.0;
    const double var = nd * (nd + 1) * (2 * nd + 1) / 24.0 - tie_term / 48.0;
    const double z = (r.statistic - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  return r;
}

} // namespace mactn
