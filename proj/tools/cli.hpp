#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mactn::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;     // unknown flag, bad value, unknown --set key
inline constexpr int kMissingInput = 3;
inline constexpr int kInvariant = 4; // internal invariant violation

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

// "4..18:2", "4..18" (step 1), "6" or "4,8,12".
std::vector<double> parse_range(const std::string &text);

} // namespace mactn::cli
