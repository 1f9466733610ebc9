#pragma once

namespace casdiff {

/// Entry point of the command-line tool. Returns 0 on success, 1 on a
/// runtime failure and 2 on a usage or configuration error.
int run_cli(int argc, const char* const* argv);

}  // namespace casdiff
