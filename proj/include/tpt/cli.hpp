#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tpt {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;  // a check or contract failed
inline constexpr int kExitUsage = 2;   // bad flags, missing or unreadable inputs

/// Runs the `tpt` command line. `args` excludes the program name. A
/// `--config FILE` of key=value lines supplies defaults for the chosen
/// subcommand; explicit flags win.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tpt
