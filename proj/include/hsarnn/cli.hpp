#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace hsarnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Dispatches `args` (without the program name) to one of gen-data, train,
/// eval, ablate, gradcheck or plot. Every run ends with one JSON line on
/// `out`; usage text and progress go to `err`. Returns 0, 1 for module
/// errors or failed checks, 2 for usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hsarnn::cli
