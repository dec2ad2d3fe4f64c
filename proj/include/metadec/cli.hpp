#pragma once

#include <iosfwd>

namespace metadec {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,      // unexpected runtime failure
  kExitUnknownVerb = 2,
  kExitBadFlags = 3,     // unparseable flags or invalid config
  kExitMissingFile = 4,
  kExitBadData = 5,      // unreadable or inconsistent dataset / checkpoint
  kExitDiverged = 6,     // non-finite training loss
};

/// Single entry point for every verb; returns the process exit code.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace metadec
