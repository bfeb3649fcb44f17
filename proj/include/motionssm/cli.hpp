#pragma once

#include <iosfwd>

namespace motionssm {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitNumeric = 3, kExitPrecondition = 4 };

/// Entry point of the `motionssm` tool; argv[0] is the program name.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace motionssm
