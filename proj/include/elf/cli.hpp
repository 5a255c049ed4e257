#pragma once

namespace elf {

/// Command-line entry point. Subcommands: synth, train, infer, eval,
/// gradcheck. Exit codes: 0 success, 1 runtime abort, 2 usage error,
/// 3 config error, 4 I/O error, 5 gradcheck failure.
int run_cli(int argc, const char* const* argv);

}  // namespace elf
