#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace quad::cli {

// Stable across versions.
enum ExitCode : int { kExitOk = 0, kExitStageFailure = 1, kExitUsage = 2 };

// args excludes the program name.
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int RunCli(int argc, char** argv);

}  // namespace quad::cli
