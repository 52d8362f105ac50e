#pragma once

namespace saevit {

/// Parses and executes one CLI invocation. Returns the process exit code;
/// precondition violations print a one-line diagnostic and return nonzero.
int cli_run(int argc, const char* const* argv);

}  // namespace saevit
