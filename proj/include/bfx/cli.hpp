#pragma once

// `bfx` command-line entry points. Every subcommand writes exactly one
// manifest.json into its output directory and exits 0 iff that manifest
// records no failures.

#include <string>
#include <vector>

namespace bfx {

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace bfx
