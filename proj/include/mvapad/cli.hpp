#pragma once

#include <iosfwd>

namespace mvapad {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Entry point of the `mvapad` tool. Subcommands: synth, train, eval,
/// run-protocol, gradcheck, export-features. Human-readable summaries go to
/// `out`, diagnostics and usage text to `err`; results are written to files.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mvapad
