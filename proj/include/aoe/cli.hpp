#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aoe::cli {

/// Exit codes: 0 success, 1 operational error, 2 validation or
/// compatibility failure (including usage errors).
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitInvalid = 2;

/// Runs one command line; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aoe::cli
