#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mactn {

// Multichannel signal, channel-major (channel c occupies values[c*samples, (c+1)*samples)).
struct Recording {
  std::vector<std::string> channels;
  double sample_rate = 0.0;
  std::size_t samples = 0;
  std::vector<double> values;

  Recording() = default;
  Recording(std::vector<std::string> names, double fs, std::size_t n_samples);

  std::size_t n_channels() const { return channels.size(); }
  std::span<double> row(std::size_t c) { return {values.data() + c * samples, samples}; }
  std::span<const double> row(std::size_t c) const { return {values.data() + c * samples, samples}; }
  // Index of a channel by name, or throws ConfigError.
  std::size_t channel_index(const std::string &name) const;
  double duration_s() const { return sample_rate > 0 ? static_cast<double>(samples) / sample_rate : 0.0; }
};

// ---------------------------------------------------------------------------
// Channel handling

struct MontageSpec {
  std::vector<std::pair<std::string, std::string>> pairs; // (positive, negative)
};

// One "A,B" pair per line; '#' starts a comment; blank lines are skipped.
MontageSpec parse_montage(const std::string &text);
MontageSpec read_montage(const std::string &path);
// One channel name per line (commas also accepted as separators).
std::vector<std::string> parse_channel_list(const std::string &text);
std::vector<std::string> read_channel_list(const std::string &path);

// Row i = x[pos_i] - x[neg_i]; output channels are named "pos-neg".
Recording apply_montage(const Recording &x, const MontageSpec &spec);
Recording select_channels(const Recording &x, const std::vector<std::string> &names);

// Built-in defaults, mirrored by the files under config/.
MontageSpec thu_ep_montage();
std::vector<std::string> thu_ep_source_channels(); // 32 electrodes incl. A1/A2
std::vector<std::string> deap_source_channels();   // 32 electrodes, distribution order
std::vector<std::string> deap_selected_channels(); // 28, left hemisphere then right

// ---------------------------------------------------------------------------
// Filters

enum class FilterKind { Bandpass, Bandstop };

// b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

struct FilterSpec {
  FilterKind kind = FilterKind::Bandpass;
  int order = 6;
  double low_hz = 0.0;
  double high_hz = 0.0;
  double sample_rate = 0.0;
  std::vector<Biquad> sections; // order/2 of them
  std::vector<std::complex<double>> poles;
};

// Digital Butterworth band filter: analog prototype of order/2, band
// transform, bilinear transform with prewarped corners, second-order sections.
FilterSpec design_butterworth(FilterKind kind, double low_hz, double high_hz, int order, double sample_rate);

std::complex<double> frequency_response(const FilterSpec &spec, double freq_hz);
double magnitude_db(const FilterSpec &spec, double freq_hz);
bool is_stable(const FilterSpec &spec);

// Causal cascade (transposed direct form II), zero initial state.
std::vector<double> filter_signal(std::span<const double> x, const FilterSpec &spec);
Recording apply_filter(const Recording &x, const FilterSpec &spec);

// ---------------------------------------------------------------------------
// Resampling, segmentation, normalization

// Keeps every factor-th sample starting at index 0.
Recording resample_down(const Recording &x, std::size_t factor);
// Same, with the factor derived from the rates; a non-integer ratio throws.
Recording resample_to(const Recording &x, double target_rate);

struct WindowSpec {
  double window_s = 14.0;
  double step_s = 4.0;
  void validate() const;
};

// floor((T - window)/step) + 1 for T >= window, else 0.
std::size_t segment_count(std::size_t total, std::size_t window, std::size_t step);

struct Segmentation {
  std::vector<Recording> segments;
  std::vector<std::string> warnings;
};

Segmentation segment_sliding(const Recording &x, const WindowSpec &spec);

// Per channel: (x - mean) / (std + eps), population std.
Recording zscore_segment(const Recording &x, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Pipelines

struct BandSpec {
  bool enabled = false;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// Stages run in a fixed order: channel selection or montage, segmentation,
// notch, bandpass, downsampling, z-score. A stage is skipped when disabled.
struct PipelineConfig {
  std::string profile = "custom";
  MontageSpec montage;                     // empty = no montage
  std::vector<std::string> channel_select; // empty = keep all (ignored when a montage is set)
  WindowSpec window;
  BandSpec notch;
  BandSpec bandpass;
  int filter_order = 6;
  double target_rate = 0.0; // 0 = keep native rate
  bool zscore = true;
  double zscore_eps = 1e-8;

  static PipelineConfig thu_ep();
  static PipelineConfig deap();
  // Looks up "thu_ep", "deap" or "custom".
  static PipelineConfig by_name(const std::string &profile);
};

// Segments of one trial, fully preprocessed. Warnings (e.g. a trial shorter
// than the window) are appended to `warnings` when given.
std::vector<Recording> preprocess_trial(const Recording &trial, const PipelineConfig &config,
                                        std::vector<std::string> *warnings = nullptr);

} // namespace mactn
