#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pera::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfigError = 2,
  kRuntimeError = 3,
  kIoError = 4,
};

/// Runs one command line (args excludes the program name). Diagnostics go to
/// `err` as a single line; normal output goes to `out`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pera::cli
