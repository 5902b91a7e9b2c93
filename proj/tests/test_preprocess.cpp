#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "mactn/errors.hpp"
#include "mactn/preprocess.hpp"
#include "mactn/random.hpp"

using namespace mactn;

namespace {

Recording sine(double freq, double fs, double seconds, std::vector<std::string> names = {"X"}) {
  const auto n = static_cast<std::size_t>(std::lround(fs * seconds));
  Recording r(std::move(names), fs, n);
  for (std::size_t c = 0; c < r.n_channels(); ++c)
    for (std::size_t t = 0; t < n; ++t) r.row(c)[t] = std::sin(2.0 * M_PI * freq * static_cast<double>(t) / fs);
  return r;
}

double rms(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

double steady_state_gain_db(const FilterSpec &f, double freq) {
  const auto x = sine(freq, 250.0, 10.0);
  const auto y = filter_signal(x.row(0), f);
  const std::size_t half = y.size() / 2;
  return 20.0 * std::log10(rms(std::span<const double>(y).subspan(half)) / rms(x.row(0).subspan(half)));
}

Recording random_recording(std::vector<std::string> names, double fs, std::size_t n, Rng &rng) {
  Recording r(std::move(names), fs, n);
  for (auto &v : r.values) v = rng.normal();
  return r;
}

std::vector<double> test_signal(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double k = static_cast<double>(i);
    x[i] = std::sin(0.3 * k) + 0.5 * std::cos(1.7 * k) + (static_cast<double>((i * 7) % 5) - 2.0) * 0.1;
  }
  return x;
}

} // namespace

TEST_CASE("butterworth bandpass response") {
  const auto f = design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 6, 250.0);
  CHECK(f.sections.size() == 3);
  CHECK(is_stable(f));
  CHECK(std::abs(frequency_response(f, 0.0)) < 1e-9);
  CHECK(std::abs(frequency_response(f, 125.0)) < 1e-6);
  CHECK(std::abs(magnitude_db(f, std::sqrt(0.5 * 45.0))) < 1.0);
  // Reference magnitudes from an independent zpk design of the same filter.
  CHECK(magnitude_db(f, 10.0) == doctest::Approx(-5.111204529e-05).epsilon(1e-6));
  CHECK(magnitude_db(f, 0.5) == doctest::Approx(-3.010299957).epsilon(1e-8));
  CHECK(magnitude_db(f, 45.0) == doctest::Approx(-3.010299957).epsilon(1e-8));
  CHECK(magnitude_db(f, 60.0) == doctest::Approx(-10.73513303).epsilon(1e-8));
  CHECK(magnitude_db(f, 100.0) == doctest::Approx(-41.39126335).epsilon(1e-8));
}

TEST_CASE("butterworth bandstop response") {
  const auto f = design_butterworth(FilterKind::Bandstop, 48.0, 52.0, 6, 250.0);
  CHECK(f.sections.size() == 3);
  CHECK(is_stable(f));
  CHECK(magnitude_db(f, 50.0) < -40.0);
  CHECK(magnitude_db(f, 50.0) == doctest::Approx(-125.2735588).epsilon(1e-6));
  CHECK(std::abs(magnitude_db(f, 10.0)) < 1e-6);
  CHECK(magnitude_db(f, 48.0) == doctest::Approx(-3.010299957).epsilon(1e-8));
}

TEST_CASE("filtering matches reference outputs") {
  const auto x = test_signal(200);
  const std::size_t idx[] = {0, 1, 2, 10, 57, 199};
  const double bp[] = {0.0224190468500634, 0.10252349939471,   0.210552822997634,
                       0.526846604302524,  -0.879696525308427, 0.425059404995455};
  const double bs[] = {0.271295620345437,  0.192115925587396, 0.285960511485288,
                       0.0546157212559016, -1.38080956049114, 0.562365487515122};
  const auto ybp = filter_signal(x, design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 6, 250.0));
  const auto ybs = filter_signal(x, design_butterworth(FilterKind::Bandstop, 48.0, 52.0, 6, 250.0));
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(ybp[idx[i]] - bp[i]) < 1e-12);
    CHECK(std::abs(ybs[idx[i]] - bs[i]) < 1e-12);
  }
}

TEST_CASE("steady-state sine gains") {
  const auto notch = design_butterworth(FilterKind::Bandstop, 48.0, 52.0, 6, 250.0);
  const auto band = design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 6, 250.0);
  CHECK(steady_state_gain_db(notch, 50.0) < -40.0);
  CHECK(std::abs(steady_state_gain_db(band, 10.0)) < 1.0);
}

TEST_CASE("filter design errors") {
  CHECK_THROWS_AS(design_butterworth(FilterKind::Bandpass, 0.5, 125.0, 6, 250.0), ConfigError);
  CHECK_THROWS_AS(design_butterworth(FilterKind::Bandpass, 10.0, 5.0, 6, 250.0), ConfigError);
  CHECK_THROWS_AS(design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 5, 250.0), ConfigError);
}

TEST_CASE("filters are stable across orders and bands") {
  for (int order : {2, 4, 6, 8})
    for (auto [lo, hi] : {std::pair{0.5, 45.0}, std::pair{4.0, 45.0}, std::pair{48.0, 52.0}, std::pair{1.0, 100.0}}) {
      CHECK(is_stable(design_butterworth(FilterKind::Bandpass, lo, hi, order, 250.0)));
      CHECK(is_stable(design_butterworth(FilterKind::Bandstop, lo, hi, order, 250.0)));
    }
}

TEST_CASE("filtering is linear and zero in, zero out") {
  Rng rng(1);
  const auto f = design_butterworth(FilterKind::Bandpass, 0.5, 45.0, 6, 250.0);
  std::vector<double> a(500), b(500), mix(500);
  for (std::size_t i = 0; i < 500; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    mix[i] = 2.5 * a[i] - 0.7 * b[i];
  }
  const auto fa = filter_signal(a, f), fb = filter_signal(b, f), fm = filter_signal(mix, f);
  for (std::size_t i = 0; i < 500; ++i) CHECK(std::abs(fm[i] - (2.5 * fa[i] - 0.7 * fb[i])) < 1e-9);
  for (double v : filter_signal(std::vector<double>(100, 0.0), f)) CHECK(v == 0.0);
}

TEST_CASE("montage") {
  Rng rng(2);
  auto x = random_recording({"A", "B", "C"}, 100.0, 50, rng);
  const auto y = apply_montage(x, parse_montage("A,B\nB,A\n# comment\n\nC, C\n"));
  REQUIRE(y.n_channels() == 3);
  CHECK(y.channels[0] == "A-B");
  for (std::size_t t = 0; t < 50; ++t) {
    CHECK(y.row(0)[t] == x.row(0)[t] - x.row(1)[t]);
    CHECK(y.row(0)[t] + y.row(1)[t] == 0.0);
    CHECK(y.row(2)[t] == 0.0);
  }
  CHECK_THROWS_AS(apply_montage(x, parse_montage("A,Q")), ConfigError);
  CHECK_THROWS_AS(parse_montage("A;B"), ConfigError);
}

TEST_CASE("default channel layouts") {
  const auto m = thu_ep_montage();
  REQUIRE(m.pairs.size() == 30);
  CHECK(m.pairs[27].first == m.pairs[20].second);
  CHECK(m.pairs[27].second == m.pairs[20].first);
  Rng rng(3);
  const auto x = random_recording(thu_ep_source_channels(), 250.0, 10, rng);
  CHECK(x.n_channels() == 32);
  CHECK(apply_montage(x, m).n_channels() == 30);

  const auto sel = deap_selected_channels();
  CHECK(sel.size() == 28);
  for (auto mid : {"Fz", "Cz", "Pz", "Oz"}) CHECK(std::find(sel.begin(), sel.end(), mid) == sel.end());
  const auto d = random_recording(deap_source_channels(), 128.0, 10, rng);
  CHECK(select_channels(d, sel).n_channels() == 28);
}

TEST_CASE("shipped config files agree with built-in defaults") {
  const std::string dir = MACTN_CONFIG_DIR;
  CHECK(read_montage(dir + "/thu_ep_montage.txt").pairs == thu_ep_montage().pairs);
  CHECK(read_channel_list(dir + "/deap_channels.txt") == deap_selected_channels());
}

TEST_CASE("resampling") {
  Rng rng(4);
  auto x = random_recording({"A"}, 250.0, 3500, rng);
  CHECK(resample_down(x, 1).values == x.values);
  const auto y = resample_down(x, 2);
  CHECK(y.samples == 1750);
  CHECK(y.sample_rate == 125.0);
  CHECK(y.row(0)[3] == x.row(0)[6]);
  CHECK(resample_to(x, 125.0).values == y.values);
  CHECK_THROWS_AS(resample_to(x, 100.0), ConfigError);
  Recording c({"A"}, 250.0, 9);
  std::fill(c.values.begin(), c.values.end(), 3.0);
  for (double v : resample_down(c, 4).values) CHECK(v == 3.0);
  CHECK(resample_down(c, 4).samples == 2);
}

TEST_CASE("segment counts") {
  CHECK(segment_count(62, 14, 4) == 13);
  CHECK(segment_count(60, 12, 4) == 13);
  CHECK(segment_count(14, 14, 4) == 1);
  CHECK(segment_count(13, 14, 4) == 0);
  // Generate-and-count oracle.
  for (std::size_t T = 1; T < 60; ++T)
    for (std::size_t w = 1; w <= 20; ++w)
      for (std::size_t s = 1; s <= w; ++s) {
        std::size_t n = 0;
        for (std::size_t start = 0; start + w <= T; start += s) ++n;
        CHECK(segment_count(T, w, s) == n);
      }
}

TEST_CASE("sliding segmentation") {
  Rng rng(5);
  auto x = random_recording({"A", "B"}, 250.0, 62 * 250, rng);
  auto seg = segment_sliding(x, {14.0, 4.0});
  REQUIRE(seg.segments.size() == 13);
  CHECK(seg.warnings.empty());
  CHECK(seg.segments[2].samples == 3500);
  CHECK(seg.segments[2].row(1)[5] == x.row(1)[2 * 1000 + 5]);
  seg.segments[0].row(0)[0] = 1e9;
  CHECK(x.row(0)[0] != 1e9);

  auto short_trial = random_recording({"A"}, 250.0, 13 * 250, rng);
  auto none = segment_sliding(short_trial, {14.0, 4.0});
  CHECK(none.segments.empty());
  CHECK(none.warnings.size() == 1);
  CHECK_THROWS_AS(segment_sliding(x, {2.0, 4.0}), ConfigError);
}

TEST_CASE("z-score") {
  Recording r({"A", "B", "C"}, 1.0, 3);
  r.values = {1, 2, 3, 5, 5, 5, 0, 0, 0};
  const auto z = zscore_segment(r);
  CHECK(z.row(0)[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(z.row(0)[1] == doctest::Approx(0.0));
  CHECK(z.row(0)[2] == doctest::Approx(1.2247).epsilon(1e-3));
  for (double v : z.row(1)) CHECK(v == 0.0);

  Rng rng(6);
  auto x = random_recording({"A", "B"}, 1.0, 1000, rng);
  for (auto &v : x.values) v = 40.0 * v + 7.0;
  const auto zx = zscore_segment(x);
  for (std::size_t c = 0; c < 2; ++c) {
    auto row = zx.row(c);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / 1000.0;
    double ss = 0.0;
    for (double v : row) ss += (v - mean) * (v - mean);
    CHECK(std::abs(mean) <= 1e-12);
    CHECK(std::abs(std::sqrt(ss / 1000.0) - 1.0) <= 1e-6);
  }
}

TEST_CASE("THU-EP pipeline") {
  Rng rng(7);
  const auto trial = random_recording(thu_ep_source_channels(), 250.0, 62 * 250, rng);
  const auto cfg = PipelineConfig::thu_ep();
  const auto segs = preprocess_trial(trial, cfg);
  REQUIRE(segs.size() == 13);
  for (auto &s : segs) {
    CHECK(s.n_channels() == 30);
    CHECK(s.samples == 1750);
    CHECK(s.sample_rate == 125.0);
    for (std::size_t c = 0; c < 30; ++c) {
      auto row = s.row(c);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) / 1750.0) <= 1e-10);
    }
  }
  // Deterministic and bitwise reproducible.
  const auto again = preprocess_trial(trial, cfg);
  for (std::size_t i = 0; i < segs.size(); ++i) CHECK(segs[i].values == again[i].values);

  // Segment totals follow the count formula over a set of trial durations.
  std::size_t total = 0, expected = 0;
  for (int secs : {54, 58, 62, 66, 70}) {
    auto t = random_recording(thu_ep_source_channels(), 250.0, static_cast<std::size_t>(secs) * 250, rng);
    total += preprocess_trial(t, cfg).size();
    expected += (secs - 14) / 4 + 1;
  }
  CHECK(total == expected);

  auto missing = random_recording({"Fp1", "F7"}, 250.0, 62 * 250, rng);
  CHECK_THROWS_AS(preprocess_trial(missing, cfg), ConfigError);
}

TEST_CASE("DEAP pipeline") {
  Rng rng(8);
  const auto trial = random_recording(deap_source_channels(), 128.0, 60 * 128, rng);
  std::vector<std::string> warnings;
  const auto segs = preprocess_trial(trial, PipelineConfig::deap(), &warnings);
  REQUIRE(segs.size() == 13);
  CHECK(warnings.empty());
  CHECK(segs[0].n_channels() == 28);
  CHECK(segs[0].samples == 1536);
  CHECK(segs[0].channels[14] == "Fp2");
  CHECK_THROWS_AS(PipelineConfig::by_name("eeglab"), ConfigError);
}
