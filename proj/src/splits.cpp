#include "mactn/splits.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mactn/errors.hpp"
#include "mactn/random.hpp"

namespace mactn {

std::string to_string(Scheme scheme) {
  switch (scheme) {
  case Scheme::Csv10: return "csv10";
  case Scheme::Loso: return "loso";
  case Scheme::Loto: return "loto";
  case Scheme::Ctv10: return "ctv10";
  }
  return "?";
}

Scheme scheme_from_string(const std::string &name) {
  for (auto s : {Scheme::Csv10, Scheme::Loso, Scheme::Loto, Scheme::Ctv10})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown split scheme '" + name + "' (expected csv10, loso, loto or ctv10)");
}

double default_val_fraction(Scheme scheme) {
  switch (scheme) {
  case Scheme::Loso:
  case Scheme::Ctv10: return 0.2;
  default: return 0.0;
  }
}

void SplitPlan::validate() const {
  std::set<std::string> all(ids.begin(), ids.end());
  if (all.size() != ids.size()) throw ContractError("split: duplicate ids");
  std::multiset<std::string> tested;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto &fold = folds[f];
    std::set<std::string> seen;
    for (const auto *part : {&fold.train, &fold.val, &fold.test})
      for (const auto &id : *part) {
        if (!all.count(id)) throw ContractError("split: fold " + std::to_string(f) + " names unknown id '" + id + "'");
        if (!seen.insert(id).second)
          throw ContractError("split: id '" + id + "' appears twice in fold " + std::to_string(f));
      }
    if (fold.test.empty()) throw ContractError("split: fold " + std::to_string(f) + " has no test ids");
    if (fold.train.empty()) throw ContractError("split: fold " + std::to_string(f) + " has no training ids");
    tested.insert(fold.test.begin(), fold.test.end());
  }
  for (const auto &id : ids)
    if (tested.count(id) != 1)
      throw ContractError("split: id '" + id + "' is tested " + std::to_string(tested.count(id)) + " times");
}

namespace {

// Splits `rest` (already shuffled) into train and val with round(frac * n) val ids.
void split_rest(std::vector<std::string> rest, double frac, Fold &fold) {
  const auto n_val = static_cast<std::size_t>(std::llround(frac * static_cast<double>(rest.size())));
  if (n_val >= rest.size() && !rest.empty()) throw ConfigError("split: validation fraction leaves no training ids");
  fold.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  fold.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(fold.val.begin(), fold.val.end());
  std::sort(fold.train.begin(), fold.train.end());
}

// k near-equal contiguous groups of the shuffled ids, larger groups first.
std::vector<std::vector<std::string>> k_groups(const std::vector<std::string> &shuffled, std::size_t k) {
  std::vector<std::vector<std::string>> groups(k);
  const std::size_t base = shuffled.size() / k, extra = shuffled.size() % k;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t len = base + (g < extra ? 1 : 0);
    groups[g].assign(shuffled.begin() + static_cast<std::ptrdiff_t>(pos),
                     shuffled.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(groups[g].begin(), groups[g].end());
    pos += len;
  }
  return groups;
}

} // namespace

SplitPlan make_splits(Scheme scheme, const std::vector<std::string> &ids, std::uint64_t seed,
                      const SplitParams &params) {
  SplitPlan plan;
  plan.scheme = scheme;
  plan.ids = ids;
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) throw ConfigError("split: duplicate ids");
  const double frac = params.val_fraction < 0 ? default_val_fraction(scheme) : params.val_fraction;
  if (frac >= 1.0) throw ConfigError("split: validation fraction must be below 1");

  Rng rng(seed);
  switch (scheme) {
  case Scheme::Csv10:
  case Scheme::Ctv10: {
    if (params.n_folds < 2) throw ConfigError("split: need at least 2 folds");
    if (ids.size() < params.n_folds)
      throw ConfigError("split: " + to_string(scheme) + " needs at least " + std::to_string(params.n_folds) +
                        " ids, got " + std::to_string(ids.size()));
    auto shuffled = ids;
    rng.shuffle(shuffled);
    const auto groups = k_groups(shuffled, params.n_folds);
    for (std::size_t f = 0; f < groups.size(); ++f) {
      Fold fold;
      fold.test = groups[f];
      std::vector<std::string> rest;
      for (std::size_t g = 0; g < groups.size(); ++g)
        if (g != f) rest.insert(rest.end(), groups[g].begin(), groups[g].end());
      if (scheme == Scheme::Ctv10) {
        std::sort(rest.begin(), rest.end());
        fold.train = rest;
      } else {
        Rng fold_rng = rng.fork();
        fold_rng.shuffle(rest);
        split_rest(rest, frac, fold);
      }
      plan.folds.push_back(std::move(fold));
    }
    if (scheme == Scheme::Ctv10) plan.segment_val_fraction = frac;
    break;
  }
  case Scheme::Loso:
  case Scheme::Loto: {
    if (ids.size() < 2) throw ConfigError("split: " + to_string(scheme) + " needs at least 2 ids");
    for (const auto &held : ids) {
      Fold fold;
      fold.test = {held};
      std::vector<std::string> rest;
      for (const auto &id : ids)
        if (id != held) rest.push_back(id);
      Rng fold_rng = rng.fork();
      fold_rng.shuffle(rest);
      split_rest(rest, frac, fold);
      plan.folds.push_back(std::move(fold));
    }
    break;
  }
  }
  plan.validate();
  return plan;
}

} // namespace mactn
