#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mactn/model.hpp"
#include "mactn/optim.hpp"
#include "mactn/preprocess.hpp"

namespace mactn {

// ---------------------------------------------------------------------------
// Errors

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class MissingFileError : public DataError {
public:
  using DataError::DataError;
};
class SizeMismatchError : public DataError {
public:
  using DataError::DataError;
};
class FormatVersionError : public DataError {
public:
  using DataError::DataError;
};
class ChecksumError : public DataError {
public:
  using DataError::DataError;
};
class ManifestError : public DataError {
public:
  using DataError::DataError;
};

// ---------------------------------------------------------------------------
// Bundles

inline constexpr const char *kFormatVersion = "1";

struct Trial {
  std::string trial_id;     // [A-Za-z0-9_.-]+, unique within the bundle
  std::string source_trial; // originating trial for segments; equals trial_id for raw trials
  int label = -1;           // class id, or -1 when only ratings are known
  std::map<std::string, double> ratings;
  std::size_t n_samples = 0;
  std::vector<double> data; // channels x samples, channel-major
};

struct EegBundle {
  std::string subject_id;
  std::string kind = "raw"; // "raw" or "segments"
  double sample_rate_hz = 0.0;
  std::vector<std::string> channel_names;
  std::size_t n_classes = 0; // 0 = unknown
  std::vector<Trial> trials;

  void validate() const;
  Recording trial_recording(std::size_t i) const;
};

// Manifest `manifest.json` plus one `trial_<id>.raw` per trial (float32 LE).
void write_bundle(const EegBundle &bundle, const std::string &dir);
EegBundle load_bundle(const std::string &dir);

// All bundles found in immediate subdirectories of `root` (sorted by name),
// or `root` itself when it holds a manifest.
std::vector<EegBundle> load_bundles(const std::string &root);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes);

// Rating > threshold -> 1, else 0. Ratings must lie in [1, 9].
int binarize_deap_rating(double rating, double threshold = 5.0);
// Sets trial labels from ratings[dimension] ("arousal" or "valence").
void binarize_deap_labels(EegBundle &bundle, const std::string &dimension, double threshold = 5.0);

// Runs a preprocessing pipeline over every trial; labels and rating maps are
// carried onto the segments, which are named <trial>_s<k>.
EegBundle preprocess_bundle(const EegBundle &raw, const PipelineConfig &config,
                            std::vector<std::string> *warnings = nullptr);

// ---------------------------------------------------------------------------
// Synthetic EEG

struct ClassBand {
  double center_hz = 10.0;
  double bandwidth_hz = 2.0;
  double amplitude = 1.0; // RMS of the class component relative to unit-RMS background
};

struct SynthProfile {
  std::size_t n_subjects = 12;
  std::size_t n_channels = 8;
  std::size_t n_trials_per_class = 2;
  double trial_len_s = 20.0;
  double sample_rate = 125.0;
  std::vector<ClassBand> classes{{6.0, 2.0, 1.0}, {10.0, 2.0, 1.0}, {20.0, 2.0, 1.0}};
  double subject_variability = 0.3; // spread of per-subject channel gains
  double noise_level = 1.0;         // RMS of the 1/f background
  double line_noise = 0.0;          // amplitude of a 50 Hz sinusoid

  void validate() const;
  // Scales every class amplitude to the given SNR in dB (RMS ratio vs background).
  void set_snr_db(double snr_db);
};

// One bundle per subject (ids s00, s01, ...). Values are float32-representable
// so a bundle round-trips through disk exactly.
std::vector<EegBundle> synth_generate(const SynthProfile &profile, std::uint64_t seed);

// ---------------------------------------------------------------------------
// JSON helpers and checkpoints

nlohmann::json to_json(const ModelConfig &config);
ModelConfig model_config_from_json(const nlohmann::json &j);

// `model.manifest` (JSON: config, seed, array names/shapes/offsets, checksum)
// plus `model.blob` (float64 LE, parameters then buffers then optional
// optimizer moments).
void save_checkpoint(const std::string &dir, const MactnModel &model, const AdamWState *optimizer = nullptr);
std::unique_ptr<MactnModel> load_checkpoint(const std::string &dir, AdamWState *optimizer = nullptr);

} // namespace mactn
