#pragma once

// Command-line front end: synth, train, pretrain, eval, attack, report.

#include <span>
#include <string>

namespace hmtl::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3 };

/// Default output directory when a config leaves run.output empty.
inline constexpr const char* kOutputEnv = "HMTL_OUTPUT_DIR";

/// argv[0] is the program name. Writes human-readable output to stdout and
/// errors to stderr; returns an ExitCode.
int run_cli(std::span<const char* const> argv);

}  // namespace hmtl::cli
