#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace optimerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitEvaluator = 3;

/// Runs one command line (args excludes the program name). Usable in-process;
/// all output goes to `out` and `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

}  // namespace optimerge::cli
