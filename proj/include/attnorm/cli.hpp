#pragma once

#include <iosfwd>

namespace attnorm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumeric = 2 };

/// Subcommands: gradcheck, paramcount, train, eval, ablate, bench.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace attnorm
