#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace clusteriv::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;

// Runs the command line `args` (without the program name). Machine output
// (JSON or CSV) goes to `out` unless --out names a file; the one-line human
// summary and error messages go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace clusteriv::cli
