#pragma once

#include <string>
#include <vector>

namespace camoforge::cli {

inline constexpr const char* kVersion = "0.1.0";

// Dispatches one command-line invocation. Returns the process exit code:
// 0 success, 1 runtime failure, 2 usage error.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace camoforge::cli
