#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mactn {

// csv10: 10-fold over subjects. loso: leave one subject out, rest split
// train/val by subject. loto: leave one trial out. ctv10: 10-fold over trials,
// validation drawn per segment from the training trials.
enum class Scheme { Csv10, Loso, Loto, Ctv10 };

std::string to_string(Scheme scheme);
Scheme scheme_from_string(const std::string &name); // throws ConfigError

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SplitParams {
  std::size_t n_folds = 10;   // csv10, ctv10
  double val_fraction = -1.0; // < 0 picks the scheme default (csv10 0, loso 0.2, loto 0, ctv10 0.2)
};

struct SplitPlan {
  Scheme scheme = Scheme::Loso;
  std::vector<std::string> ids;
  std::vector<Fold> folds;
  // ctv10 only: fraction of the training trials' segments moved to validation.
  double segment_val_fraction = 0.0;

  // Ids name subjects (csv10, loso) or trials (loto, ctv10).
  bool subject_level() const { return scheme == Scheme::Csv10 || scheme == Scheme::Loso; }
  // Disjointness within folds and exact test coverage across folds.
  void validate() const;
};

double default_val_fraction(Scheme scheme);

SplitPlan make_splits(Scheme scheme, const std::vector<std::string> &ids, std::uint64_t seed,
                      const SplitParams &params = {});

} // namespace mactn
