// Acceptance run: one pass/fail line per criterion. Exit status is non-zero
// when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

#include "CLI11.hpp"
#include "mactn/explain.hpp"
#include "mactn/grad_check.hpp"
#include "mactn/train.hpp"

namespace fs = std::filesystem;
using namespace mactn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char *f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::size_t g_workers = 1;

Tensor random_tensor(Shape shape, Rng &rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto &x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic task: 12 subjects, 8 channels, classes at 6/10/20 Hz, 125 Hz,
// windows cut every 2 s from 20 s trials and z-scored.

Dataset synthetic_task(double snr_db, double window_s, bool null_signal = false, std::size_t n_subjects = 12,
                       std::size_t n_channels = 8, double trial_len_s = 20.0) {
  SynthProfile p;
  p.n_subjects = n_subjects;
  p.n_channels = n_channels;
  p.trial_len_s = trial_len_s;
  if (null_signal)
    for (auto &c : p.classes) c.amplitude = 0.0;
  else
    p.set_snr_db(snr_db);
  PipelineConfig pc;
  pc.window.window_s = window_s;
  pc.window.step_s = 2.0;
  std::vector<EegBundle> segs;
  for (const auto &b : synth_generate(p, 11)) segs.push_back(preprocess_bundle(b, pc));
  return Dataset::from_bundles(segs);
}

// Flooding level for the 3-class synthetic runs; 1.3 exceeds ln 3 and would
// hold the loss above chance.
constexpr double kSyntheticFlood = 0.2;

CvReport loso(const Dataset &d, const ModelConfig &mc, std::vector<std::size_t> folds, std::size_t epochs) {
  TrainConfig tc;
  tc.seed = 3;
  tc.max_epochs = epochs;
  tc.flooding_b = kSyntheticFlood;
  const auto plan = make_splits(Scheme::Loso, d.subjects(), 3);
  CvOptions o;
  o.workers = g_workers;
  o.fold_subset = std::move(folds);
  return run_cross_validation(d, plan, mc, tc, o);
}

double fold_seconds(const FoldResult &f) {
  double s = 0;
  for (const auto &e : f.history.epochs) s += e.seconds;
  return s;
}

// ---------------------------------------------------------------------------
// 1

Outcome shapes() {
  const auto t0 = Clock::now();
  NoGradGuard ng;
  auto run = [](const ModelConfig &cfg, const std::vector<Shape> &expected) {
    MactnModel model(cfg, 1);
    Rng rng(2);
    auto r = model.forward(random_tensor({1, cfg.n_channels, cfg.input_len}, rng), Mode::Eval, true);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < std::min(expected.size(), r.trace.steps.size()); ++i)
      ok += r.trace.steps[i].shape == expected[i];
    return r.trace.steps.size() == expected.size() ? ok : 0;
  };
  const std::vector<Shape> thu{{30, 1750}, {120, 1736}, {120, 1722}, {120, 430}, {120, 430}, {120, 430}, {120, 430},
                               {120, 430}, {120, 86},   {120, 86},   {86, 120},  {1, 120},  {87, 120},  {87, 120},
                               {87, 120},  {87, 120},   {87, 120},   {87, 120},  {87, 120}, {120},      {9}};
  const std::vector<Shape> deap{{28, 1536}, {112, 1522}, {112, 1508}, {112, 377}, {112, 377}, {112, 377},
                                {112, 377}, {112, 377},  {112, 75},   {112, 75},  {75, 112},  {1, 112},
                                {76, 112},  {76, 112},   {76, 112},   {76, 112},  {76, 112},  {76, 112},
                                {76, 112},  {112},       {2}};
  const auto a = run(ModelConfig::thu_ep(), thu), b = run(ModelConfig::deap(), deap);
  const double secs = seconds_since(t0);
  return {a == 21 && b == 21 && secs < 10.0, fmt("THU-EP %zu/21, DEAP %zu/21 steps match, %.2f s", a, b, secs)};
}

// ---------------------------------------------------------------------------
// 2

Outcome gradients() {
  const auto t0 = Clock::now();
  const double h = 1e-5, tol = 1e-4;
  double worst = 0;
  std::string worst_name;
  std::size_t failed = 0, checks = 0;
  auto note = [&](const std::string &name, const GradCheckReport &r) {
    ++checks;
    if (!r.passed) ++failed;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };
  auto check = [&](const std::string &name, const std::function<Tensor(const Tensor &)> &f, const Tensor &x) {
    note(name, grad_check(f, x, h, tol));
  };

  Rng rng(21);
  {
    Conv1dSpec s{4, 8, 5, 2, 2, true};
    auto w = random_tensor(s.weight_shape(), rng), b = random_tensor({8}, rng), x = random_tensor({2, 4, 12}, rng);
    check("conv1d.x", [&](const Tensor &z) { return conv1d(z, w, b, s); }, x);
    check("conv1d.w", [&](const Tensor &z) { return conv1d(x, z, b, s); }, w);
    check("conv1d.b", [&](const Tensor &z) { return conv1d(x, w, z, s); }, b);
  }
  {
    Conv1dSpec d{3, 6, 5, 3, 0, false}, dp{6, 6, 5, 6, 2, false}, p{6, 4, 1, 1, 0, false};
    auto x = random_tensor({2, 3, 14}, rng), wd = random_tensor(d.weight_shape(), rng),
         wdp = random_tensor(dp.weight_shape(), rng), wp = random_tensor(p.weight_shape(), rng);
    check("depthwise.x", [&](const Tensor &z) { return depthwise_conv1d(z, wd, d); }, x);
    check("depthwise.w", [&](const Tensor &z) { return depthwise_conv1d(x, z, d); }, wd);
    auto y = depthwise_conv1d(x, wd, d).detach();
    check("pointwise.x", [&](const Tensor &z) { return pointwise_conv1d(z, wp, p); }, y);
    check("pointwise.w", [&](const Tensor &z) { return pointwise_conv1d(y, z, p); }, wp);
    check("separable.x", [&](const Tensor &z) { return separable_conv1d(z, wdp, dp, wp, p); }, y);
    check("separable.wd", [&](const Tensor &z) { return separable_conv1d(y, z, dp, wp, p); }, wdp);
  }
  {
    BatchNorm1d bn(3);
    bn.gamma = random_tensor({3}, rng, 0.5, 1.5);
    bn.beta = random_tensor({3}, rng);
    bn.running_mean = random_tensor({3}, rng);
    bn.running_var = random_tensor({3}, rng, 0.5, 2.0);
    auto x = random_tensor({4, 3, 6}, rng);
    check("batchnorm.train.x", [&](const Tensor &z) { return batch_norm1d(z, bn, Mode::Train); }, x);
    check("batchnorm.eval.x", [&](const Tensor &z) { return batch_norm1d(z, bn, Mode::Eval); }, x);
    auto g = bn.gamma;
    check("batchnorm.gamma", [&](const Tensor &z) {
      BatchNorm1d b2 = bn;
      b2.gamma = z;
      return batch_norm1d(x, b2, Mode::Train);
    }, g);
  }
  {
    LayerNorm ln(5);
    ln.gamma = random_tensor({5}, rng, 0.5, 1.5);
    ln.beta = random_tensor({5}, rng);
    auto x = random_tensor({2, 3, 5}, rng);
    check("layernorm.x", [&](const Tensor &z) { return layer_norm(z, ln); }, x);
    check("layernorm.gamma", [&](const Tensor &z) {
      LayerNorm l2 = ln;
      l2.gamma = z;
      return layer_norm(x, l2);
    }, ln.gamma);
  }
  {
    auto x = random_tensor({2, 3, 11}, rng);
    check("avgpool", [](const Tensor &z) { return avg_pool1d(z, 4); }, x);
    check("dropout", [](const Tensor &z) {
      Rng r(5);
      return dropout(z, 0.5, Mode::Train, r);
    }, x);
    check("relu", [](const Tensor &z) { return relu(z); }, x);
    check("softmax", [](const Tensor &z) { return softmax(z, 2); }, x);
  }
  {
    auto w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng), x = random_tensor({2, 4, 5}, rng);
    check("linear.x", [&](const Tensor &z) { return linear(z, w, b); }, x);
    check("linear.w", [&](const Tensor &z) { return linear(x, z, b); }, w);
  }
  {
    ParameterStore store;
    Rng init(22);
    AttentionParams p{random_tensor({6, 8}, rng), random_tensor({6, 8}, rng), random_tensor({6, 8}, rng),
                      random_tensor({8, 6}, rng)};
    auto x = random_tensor({2, 5, 6}, rng);
    check("mhsa.x", [&](const Tensor &z) { return mhsa(z, p, 2, 4).value; }, x);
    check("mhsa.wq", [&](const Tensor &z) {
      auto q = p;
      q.wq = z;
      return mhsa(x, q, 2, 4).value;
    }, p.wq);
    EncoderLayer enc(6, 2, 4, 10, store, "enc", init);
    check("encoder.x", [&](const Tensor &z) { return enc.forward(z, nullptr); }, x);
    SkAttention sk(4, {1, 3, 5}, 3, store, "sk", init);
    auto xs = random_tensor({3, 4, 9}, rng);
    check("sk.x", [&](const Tensor &z) { return sk.forward(z, Mode::Train).value; }, xs);
    DepthConvBlock depth(2, 2, 3, store, "depth", init);
    auto xd = random_tensor({2, 2, 12}, rng);
    check("depthblock.x", [&](const Tensor &z) {
      Rng r(6);
      return depth.forward(z, Mode::Train, 0.5, r, nullptr, "", "");
    }, xd);
    SeparableConvBlock sc(4, 3, store, "sconv", init);
    check("sconvblock.x", [&](const Tensor &z) {
      Rng r(7);
      return sc.forward(z, Mode::Train, 0.5, r, nullptr, "", "");
    }, xs);
  }
  {
    Tensor logits = random_tensor({4, 3}, rng, -2, 2);
    const std::vector<int> y{0, 2, 1, 1};
    check("flooded_ce.b0", [&](const Tensor &z) { return flooding_cross_entropy(z, y, 0.0).loss; }, logits);
    check("flooded_ce.b3", [&](const Tensor &z) { return flooding_cross_entropy(z, y, 3.0).loss; }, logits);
  }

  // Miniature end to end (M=4, T=128, one encoder layer), dropout active with
  // a fixed mask per evaluation.
  std::size_t e2e_checked = 0;
  {
    const auto cfg = ModelConfig::miniature(4, 128, 3);
    MactnModel model(cfg, 23);
    const auto x = random_tensor({3, 4, 128}, rng);
    const std::vector<int> y{0, 1, 2};
    auto loss = [&] {
      model.dropout_rng() = Rng(24);
      return flooding_cross_entropy(model.forward(x, Mode::Train).logits, y, 0.0).loss;
    };
    std::vector<NamedTensor> params;
    for (auto &[name, t] : model.parameters().parameters()) params.push_back({name, t});
    auto r = grad_check_params(loss, params, h, tol, 0);
    e2e_checked = r.checked;
    note("miniature." + r.worst_tensor, r);
    auto xin = x.detach();
    note("miniature.input", grad_check([&](const Tensor &z) {
           model.dropout_rng() = Rng(24);
           return flooding_cross_entropy(model.forward(z, Mode::Train).logits, y, 0.0).loss;
         }, xin, h, tol));
  }
  const double secs = seconds_since(t0);
  return {failed == 0 && worst <= tol && secs < 120.0,
          fmt("%zu checks, %zu failed, %zu end-to-end coordinates, max rel err %.2e (%s), %.1f s", checks, failed,
              e2e_checked, worst, worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 3

// Sliding dot product over a zero-padded copy; [C, T] input.
std::vector<double> naive_conv(const Tensor &x, const Tensor &w, const Conv1dSpec &s) {
  const std::size_t C = x.size(0), T = x.size(1), Tp = T + 2 * s.padding;
  const std::size_t To = Tp - s.kernel_size + 1;
  const std::size_t icpg = C / s.groups, ocpg = s.out_channels / s.groups;
  std::vector<double> padded(C * Tp, 0.0), out(s.out_channels * To, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < T; ++t) padded[c * Tp + t + s.padding] = x.at({c, t});
  for (std::size_t oc = 0; oc < s.out_channels; ++oc)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t ic = 0; ic < icpg; ++ic)
        for (std::size_t j = 0; j < s.kernel_size; ++j)
          out[oc * To + t] += w.at({oc, ic, j}) * padded[((oc / ocpg) * icpg + ic) * Tp + t + j];
  return out;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome oracles() {
  Rng rng(31);
  double conv_err = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t C = 1 + rng.index(6), T = 16 + rng.index(40), k = 1 + 2 * rng.index(4);
    const std::size_t mult = 1 + rng.index(3), pad = rng.index(k);
    auto x = random_tensor({C, T}, rng);
    switch (rep % 3) {
    case 0: {
      Conv1dSpec s{C, C * mult, k, C, pad, false};
      auto w = random_tensor(s.weight_shape(), rng);
      conv_err = std::max(conv_err, max_diff(depthwise_conv1d(x, w, s).data(), naive_conv(x, w, s)));
      break;
    }
    case 1: {
      Conv1dSpec s{C, 1 + rng.index(6), 1, 1, 0, false};
      auto w = random_tensor(s.weight_shape(), rng);
      conv_err = std::max(conv_err, max_diff(pointwise_conv1d(x, w, s).data(), naive_conv(x, w, s)));
      break;
    }
    default: {
      Conv1dSpec d{C, C, k, C, k / 2, false}, p{C, 1 + rng.index(6), 1, 1, 0, false};
      auto wd = random_tensor(d.weight_shape(), rng), wp = random_tensor(p.weight_shape(), rng);
      const auto mid = naive_conv(x, wd, d);
      const auto ref = naive_conv(Tensor({C, mid.size() / C}, mid), wp, p);
      conv_err = std::max(conv_err, max_diff(separable_conv1d(x, wd, d, wp, p).data(), ref));
    }
    }
  }

  // Multi-head attention from explicit loops: head i reads columns
  // [i*dk, (i+1)*dk) of the projections.
  const std::size_t B = 2, S = 5, D = 6, H = 2, dk = 3;
  auto X = random_tensor({B, S, D}, rng), Wq = random_tensor({D, H * dk}, rng), Wk = random_tensor({D, H * dk}, rng),
       Wv = random_tensor({D, H * dk}, rng), Wo = random_tensor({H * dk, D}, rng);
  std::vector<double> want(B * S * D, 0.0), want_att(B * H * S * S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    auto proj = [&](const Tensor &W, std::size_t s, std::size_t c) {
      double acc = 0;
      for (std::size_t d = 0; d < D; ++d) acc += X.at({b, s, d}) * W.at({d, c});
      return acc;
    };
    std::vector<double> ctx(S * H * dk, 0.0);
    for (std::size_t hh = 0; hh < H; ++hh)
      for (std::size_t i = 0; i < S; ++i) {
        std::vector<double> e(S);
        double z = 0;
        for (std::size_t j = 0; j < S; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dk; ++c) dot += proj(Wq, i, hh * dk + c) * proj(Wk, j, hh * dk + c);
          e[j] = std::exp(dot / std::sqrt(static_cast<double>(dk)));
          z += e[j];
        }
        for (std::size_t j = 0; j < S; ++j) {
          want_att[((b * H + hh) * S + i) * S + j] = e[j] / z;
          for (std::size_t c = 0; c < dk; ++c) ctx[i * H * dk + hh * dk + c] += e[j] / z * proj(Wv, j, hh * dk + c);
        }
      }
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t c = 0; c < H * dk; ++c) want[(b * S + i) * D + d] += ctx[i * H * dk + c] * Wo.at({c, d});
  }
  const auto got = mhsa(X, AttentionParams{Wq, Wk, Wv, Wo}, H, dk);
  const double mhsa_err = std::max(max_diff(got.value.data(), want), max_diff(got.attention.data(), want_att));

  // AdamW (wd = 0) against the textbook Adam recursion on least squares.
  double adam_err = 0;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Rng r(40 + trial);
    const std::size_t n = 6;
    std::vector<double> A(n * n), y(n), init(n);
    for (auto &a : A) a = r.normal();
    for (auto &b : y) b = r.normal();
    for (auto &x : init) x = r.normal();
    auto grad_of = [&](const std::vector<double> &th) {
      std::vector<double> res(n, 0.0), g(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) res[i] += A[i * n + j] * th[j];
        res[i] -= y[i];
      }
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) g[j] += A[i * n + j] * res[i];
      return g;
    };
    AdamWConfig cfg;
    cfg.weight_decay = 0;
    cfg.lr = 0.01;
    Tensor p({n}, init, true);
    AdamWState state;
    std::vector<double> th = init, m(n, 0.0), v(n, 0.0);
    for (int t = 1; t <= 100; ++t) {
      std::vector<double> cur(p.data().begin(), p.data().end());
      p.zero_grad();
      p.accumulate_grad(grad_of(cur));
      adamw_step({p}, state, cfg);
      const auto g = grad_of(th);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
        th[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      }
      adam_err = std::max(adam_err, max_diff(p.data(), th));
    }
  }
  return {conv_err <= 1e-12 && mhsa_err <= 1e-10 && adam_err <= 1e-12,
          fmt("conv max err %.2e over 100 cases, MHSA %.2e, AdamW vs Adam %.2e over 100 steps x 5", conv_err,
              mhsa_err, adam_err)};
}

// ---------------------------------------------------------------------------
// 4

Outcome normalization() {
  NoGradGuard ng;
  auto cfg = ModelConfig::miniature(4, 128, 3);
  cfg.sk_kernel_sizes = {1, 3, 5};
  cfg.n_encoder_layers = 2;
  double worst = 0;
  std::size_t rows = 0, sk_sums = 0;
  Rng rng(41);
  std::unique_ptr<MactnModel> model;
  for (int i = 0; i < 1000; ++i) {
    if (i % 100 == 0) model = std::make_unique<MactnModel>(cfg, 100 + static_cast<std::uint64_t>(i));
    const double amp = i % 4 == 3 ? 20.0 : 1.0;
    auto r = model->forward(random_tensor({2, 4, 128}, rng, -amp, amp), i % 2 ? Mode::Train : Mode::Eval, true);
    for (const auto &a : r.trace.attention) {
      const std::size_t S = a.size(3);
      const auto d = a.data();
      for (std::size_t row = 0; row < d.size() / S; ++row, ++rows) {
        double s = 0;
        for (std::size_t j = 0; j < S; ++j) s += d[row * S + j];
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    const auto &w = r.trace.sk_weights;
    for (std::size_t k = 0; k < w.front().numel(); ++k, ++sk_sums) {
      double s = 0;
      for (const auto &stream : w) s += stream.data()[k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return {worst <= 1e-9 && rows > 0 && sk_sums > 0,
          fmt("1000 forwards, %zu attention rows, %zu SK channel sums, max |sum-1| %.2e", rows, sk_sums, worst)};
}

// ---------------------------------------------------------------------------
// 5

double reference_ce(std::span<const double> logits, std::size_t k, std::span<const int> y) {
  long double total = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto row = logits.subspan(i * k, k);
    const long double mx = *std::max_element(row.begin(), row.end());
    long double z = 0;
    for (double v : row) z += std::exp(static_cast<long double>(v) - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(y[i])];
  }
  return static_cast<double>(total / static_cast<long double>(y.size()));
}

Outcome flooding() {
  const auto data = synthetic_task(0.0, 4.0, false, 3, 4, 10.0);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < data.size(); ++i) (data.info(i).subject == "s02" ? va : tr).push_back(i);
  TrainConfig tc;
  tc.max_epochs = 15;
  tc.seed = 5;
  tc.flooding_b = 1.3;
  MactnModel model(ModelConfig::miniature(4, 500, 3), 6);
  std::size_t steps = 0, below = 0;
  double worst = 0, min_loss = INFINITY, min_ce = INFINITY;
  train(model, data, tr, va, tc, [&](const StepRecord &s) {
    ++steps;
    const double ce = reference_ce(s.logits, 3, s.labels);
    below += s.flooded_loss < 1.3;
    min_loss = std::min(min_loss, s.flooded_loss);
    min_ce = std::min(min_ce, ce);
    worst = std::max(worst, std::abs(s.flooded_loss - (std::abs(ce - 1.3) + 1.3)));
  });
  return {steps > 0 && below == 0 && worst <= 1e-10,
          fmt("%zu steps, min flooded %.6f, min CE %.6f, max |L-(|CE-b|+b)| %.2e", steps, min_loss, min_ce, worst)};
}

// ---------------------------------------------------------------------------
// 6

Outcome filters() {
  const auto band = design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 6, 250.0);
  const auto notch = design_butterworth(FilterKind::Bandstop, 48.0, 52.0, 6, 250.0);
  const double g10 = magnitude_db(band, 10.0), g0 = magnitude_db(band, 0.0), g60 = magnitude_db(band, 60.0);
  std::vector<double> x(2500);
  for (std::size_t n = 0; n < x.size(); ++n) x[n] = std::sin(2 * M_PI * 50.0 * static_cast<double>(n) / 250.0);
  const auto y = filter_signal(x, notch);
  auto rms = [](std::span<const double> v) {
    double s = 0;
    for (double a : v) s += a * a;
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  const double gn = 20 * std::log10(rms(std::span<const double>(y).subspan(1250)) /
                                    rms(std::span<const double>(x).subspan(1250)));
  const bool ok10 = std::abs(g10) <= 1.0, ok0 = g0 < -40.0, ok60 = g60 < -40.0, okn = gn < -40.0;
  return {ok10 && ok0 && ok60 && okn,
          fmt("10 Hz %.2e dB %s, DC %g dB %s, 60 Hz %.2f dB %s, notch 50 Hz %.1f dB %s", g10, ok10 ? "ok" : "FAIL", g0,
              ok0 ? "ok" : "FAIL", g60, ok60 ? "ok" : "FAIL (needs < -40)", gn, okn ? "ok" : "FAIL")};
}

// ---------------------------------------------------------------------------
// 7

std::vector<std::string> ids(std::size_t n, const std::string &prefix) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i));
  return v;
}

Outcome split_exactness() {
  std::vector<std::string> bad;
  {
    const auto plan = make_splits(Scheme::Loso, ids(80, "s"), 7);
    plan.validate();
    bool ok = plan.folds.size() == 80;
    for (const auto &f : plan.folds) ok = ok && f.train.size() == 63 && f.val.size() == 16 && f.test.size() == 1;
    if (!ok) bad.push_back("loso");
  }
  {
    const auto all = ids(80, "s");
    const auto plan = make_splits(Scheme::Csv10, all, 7);
    plan.validate();
    std::map<std::string, int> seen;
    for (const auto &f : plan.folds)
      for (const auto &s : f.test) ++seen[s];
    bool ok = plan.folds.size() == 10 && seen.size() == 80;
    for (const auto &[s, n] : seen) ok = ok && n == 1;
    if (!ok) bad.push_back("csv10");
  }
  {
    const auto plan = make_splits(Scheme::Loto, ids(28, "t"), 7);
    plan.validate();
    bool ok = plan.folds.size() == 28;
    for (const auto &f : plan.folds) ok = ok && f.train.size() == 27 && f.val.empty() && f.test.size() == 1;
    if (!ok) bad.push_back("loto");
  }
  {
    const auto all = ids(40, "t");
    const auto plan = make_splits(Scheme::Ctv10, all, 7);
    plan.validate();
    std::set<std::string> covered;
    bool ok = plan.folds.size() == 10;
    for (const auto &f : plan.folds) {
      ok = ok && f.test.size() == 4;
      for (const auto &t : f.test) ok = ok && covered.insert(t).second;
    }
    ok = ok && covered == std::set<std::string>(all.begin(), all.end());
    if (!ok) bad.push_back("ctv10");
  }
  std::string detail = "loso 80 x 63/16/1, csv10 once each, loto 28 x 27/1, ctv10 10 x 4 disjoint";
  if (!bad.empty()) detail = "mismatch in " + std::accumulate(bad.begin(), bad.end(), std::string{});
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// 8, 9

constexpr std::size_t kEpochs = 30;

Outcome learnability() {
  const auto t0 = Clock::now();
  const auto data = synthetic_task(0.0, 4.0);
  const auto rep = loso(data, ModelConfig::miniature(8, 500, 3), {}, kEpochs);
  const double total = seconds_since(t0);
  double worst_fold = 0;
  for (const auto &f : rep.folds) worst_fold = std::max(worst_fold, fold_seconds(f));
  return {rep.folds.size() == 12 && rep.accuracy.mean >= 0.85 && worst_fold <= 300 && total <= 3600,
          fmt("LOSO 12 folds, %zu segments, acc %.1f%% +/- %.1f, slowest fold %.0f s, total %.0f s", data.size(),
              100 * rep.accuracy.mean, 100 * rep.accuracy.std, worst_fold, total)};
}

Outcome null_check() {
  const auto data = synthetic_task(0.0, 4.0, true);
  const auto rep = loso(data, ModelConfig::miniature(8, 500, 3), {}, kEpochs);
  const double acc = 100 * rep.accuracy.mean;
  return {rep.folds.size() == 12 && std::abs(acc - 100.0 / 3.0) <= 5.0,
          fmt("class amplitude 0: acc %.1f%% +/- %.1f (target 33.3 +/- 5)", acc, 100 * rep.accuracy.std)};
}

// ---------------------------------------------------------------------------
// 10, 11: directional checks at -15 dB on the first three LOSO folds

const std::vector<std::size_t> kDirectionalFolds{0, 1, 2};

Outcome ablations() {
  const auto hard = synthetic_task(-15.0, 4.0);
  const auto base = ModelConfig::miniature(8, 500, 3);
  std::map<std::string, double> acc;
  for (const char *which : {"full", "depth", "sconv", "sk"}) {
    auto cfg = base;
    if (std::strcmp(which, "depth") == 0) cfg.use_depth_block = false;
    if (std::strcmp(which, "sconv") == 0) cfg.use_sconv_block = false;
    if (std::strcmp(which, "sk") == 0) cfg.use_sk_attention = false;
    acc[which] = 100 * loso(hard, cfg, kDirectionalFolds, kEpochs).accuracy.mean;
  }
  // Whole-extractor switches only need to train and evaluate.
  const auto easy = synthetic_task(0.0, 4.0, false, 3, 8, 10.0);
  std::size_t runnable = 0;
  for (int which = 0; which < 2; ++which) {
    auto cfg = base;
    (which == 0 ? cfg.use_gtfe : cfg.use_ltfe) = false;
    const auto rep = loso(easy, cfg, {0}, 2);
    runnable += rep.folds.size() == 1 && std::isfinite(rep.accuracy.mean);
  }
  const double d_depth = acc["full"] - acc["depth"], d_sconv = acc["full"] - acc["sconv"],
               d_sk = acc["full"] - acc["sk"];
  return {runnable == 2 && d_sconv > d_depth && d_sconv > d_sk,
          fmt("GTFE/LTFE-off runnable %zu/2; acc full %.1f, -depth %.1f, -sconv %.1f, -SK %.1f; drops %.1f/%.1f/%.1f",
              runnable, acc["full"], acc["depth"], acc["sconv"], acc["sk"], d_depth, d_sconv, d_sk)};
}

Outcome window_sweep() {
  std::vector<double> xs, ys;
  bool monotone = true;
  for (std::size_t w = 4; w <= 18; w += 2) {
    auto cfg = ModelConfig::thu_ep();
    cfg.input_len = w * 125;
    xs.push_back(static_cast<double>(w));
    ys.push_back(static_cast<double>(count_flops(cfg).total()));
    if (ys.size() > 1) monotone = monotone && ys.back() > ys[ys.size() - 2];
  }
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n, my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double r2 = sxy * sxy / (sxx * syy);

  std::map<int, double> acc;
  for (int w : {2, 8}) {
    const auto data = synthetic_task(-15.0, w);
    acc[w] = 100 * loso(data, ModelConfig::miniature(8, static_cast<std::size_t>(w) * 125, 3), kDirectionalFolds,
                        kEpochs)
                       .accuracy.mean;
  }
  return {monotone && r2 >= 0.99 && acc[8] >= acc[2],
          fmt("FLOPs 4-18 s monotone %s, R^2 %.6f; acc 2 s %.1f%%, 8 s %.1f%%", monotone ? "yes" : "no", r2, acc[2],
              acc[8])};
}

// ---------------------------------------------------------------------------
// 12

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome reproducibility() {
  const auto data = synthetic_task(0.0, 4.0, false, 3, 4, 10.0);
  const auto plan = make_splits(Scheme::Loso, data.subjects(), 9);
  TrainConfig tc;
  tc.seed = 9;
  tc.max_epochs = 4;
  tc.flooding_b = kSyntheticFlood;
  const auto mc = ModelConfig::miniature(4, 500, 3);
  const fs::path root = fs::temp_directory_path() / ("mactn_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const auto probe = iota_n(data.size());

  std::map<std::size_t, std::vector<double>> logits_a;
  auto run = [&](const std::string &tag, std::map<std::size_t, std::vector<double>> *logits) {
    CvOptions o;
    o.workers = g_workers;
    std::mutex mu;
    o.on_trained = [&](std::size_t f, MactnModel &model) {
      save_checkpoint((root / tag / std::to_string(f)).string(), model);
      if (!logits) return;
      NoGradGuard ng;
      auto l = model.forward(data.batch(probe), Mode::Eval).logits;
      std::lock_guard lock(mu);
      (*logits)[f].assign(l.data().begin(), l.data().end());
    };
    return to_json(run_cross_validation(data, plan, mc, tc, o)).dump();
  };
  const auto ja = run("a", &logits_a), jb = run("b", nullptr);

  std::size_t same_files = 0, files = 0, same_logits = 0;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    for (const char *name : {"model.blob", "model.manifest"}) {
      ++files;
      const auto a = slurp(root / "a" / std::to_string(f) / name);
      same_files += !a.empty() && a == slurp(root / "b" / std::to_string(f) / name);
    }
    auto loaded = load_checkpoint((root / "a" / std::to_string(f)).string());
    NoGradGuard ng;
    auto l = loaded->forward(data.batch(probe), Mode::Eval).logits;
    const auto &want = logits_a[f];
    same_logits += want.size() == l.numel() && std::memcmp(want.data(), l.data().data(), want.size() * 8) == 0;
  }
  fs::remove_all(root);
  const bool same_report = ja == jb;
  return {same_report && same_files == files && same_logits == plan.folds.size(),
          fmt("reports %s, checkpoint files %zu/%zu identical, round-trip logits bitwise %zu/%zu",
              same_report ? "identical" : "DIFFER", same_files, files, same_logits, plan.folds.size())};
}

// ---------------------------------------------------------------------------
// 13

Outcome explainability() {
  MactnModel model(ModelConfig::thu_ep(), 3);
  const auto set = compose_layers(model, "depth.conv1", "depth.conv2", 125.0);
  const auto *d = model.depth_block();
  Rng rng(51);
  double err = 0;
  for (std::size_t ch = 0; ch < set.taps.size(); ++ch) {
    std::vector<double> x(200);
    for (auto &v : x) v = rng.normal();
    const auto w1 = d->conv1.weight.data().subspan(ch * 15, 15), w2 = d->conv2.weight.data().subspan(ch * 15, 15);
    auto corr = [](const std::vector<double> &in, std::span<const double> k) {
      Conv1dSpec s{1, 1, k.size(), 1, 0, false};
      auto y = conv1d(Tensor({1, 1, in.size()}, in), Tensor({1, 1, k.size()}, {k.begin(), k.end()}), Tensor{}, s);
      return std::vector<double>(y.data().begin(), y.data().end());
    };
    err = std::max(err, max_diff(corr(x, set.taps[ch]), corr(corr(x, w1), w2)));
  }

  Dataset data = [] {
    Rng r(52);
    EegBundle b;
    b.subject_id = "s01";
    b.kind = "segments";
    b.sample_rate_hz = 125.0;
    for (std::size_t c = 0; c < 30; ++c) b.channel_names.push_back("E" + std::to_string(c));
    b.n_classes = 3;
    for (std::size_t i = 0; i < 2; ++i) {
      Trial t;
      t.trial_id = t.source_trial = "seg" + std::to_string(i);
      t.label = static_cast<int>(i);
      t.n_samples = 1750;
      t.data.resize(30 * 1750);
      for (auto &x : t.data) x = r.normal();
      b.trials.push_back(std::move(t));
    }
    return Dataset::from_bundles({b});
  }();
  const auto tr = extract_self_attention(model, reshape(data.batch(std::vector<std::size_t>{0}), {30, 1750}), 125.0);
  const bool trace_ok = tr.raw.size() == model.config().seq_len() && tr.normalized.size() == tr.raw.size();

  const auto att = extract_channel_attention(model, data, iota_n(2));
  std::size_t streams_ok = 0;
  for (std::size_t s = 0; s < att.channel.size(); ++s) {
    const auto &raw = att.channel[s], &n = att.normalized[s];
    streams_ok += raw.size() == 30 && n.size() == 30 &&
                  std::max_element(raw.begin(), raw.end()) - raw.begin() == std::max_element(n.begin(), n.end()) - n.begin();
  }
  const std::size_t n_streams = model.config().sk_kernel_sizes.size();
  return {err <= 1e-10 && set.exact && trace_ok && att.channel.size() == n_streams && streams_ok == n_streams,
          fmt("composed kernels (29 taps x %zu) max err %.2e; trace %zu tokens (d_seq %zu); channel attention %zu/%zu "
              "streams with 30 values and stable argmax",
              set.taps.size(), err, tr.raw.size(), model.config().seq_len(), streams_ok, n_streams)};
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Acceptance criteria for the MACTN pipeline"};
  std::vector<int> only;
  g_workers = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--only", only, "Run only these criteria (1-13)")->delimiter(',');
  app.add_option("--workers", g_workers, "Fold-level worker threads")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char *, std::function<Outcome()>>> criteria{
      {"shape conformance", shapes},
      {"gradient correctness", gradients},
      {"oracle equivalence", oracles},
      {"attention normalization", normalization},
      {"flooding contract", flooding},
      {"filter responses", filters},
      {"split-protocol exactness", split_exactness},
      {"synthetic learnability", learnability},
      {"null check", null_check},
      {"ablation machinery", ablations},
      {"window-length sweep", window_sweep},
      {"reproducibility", reproducibility},
      {"explainability exports", explainability},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << " " << criteria[i].first << ": " << o.detail
              << fmt("  (%.1f s)", seconds_since(t0)) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
