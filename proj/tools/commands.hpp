#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace vitbench::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitDegenerate = 5;

// Runs one command line (args excludes the program name). Progress goes to
// `out`, diagnostics to `err`; the return value is the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vitbench::cli
