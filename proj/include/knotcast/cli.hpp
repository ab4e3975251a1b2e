#pragma once

#include <string>
#include <vector>

namespace knotcast::cli {

/// Full command-line entry point; args excludes the program name. Returns the
/// process exit code: 0 on success, 1 on usage or data errors, 3 when some
/// cells failed (a failure manifest is written next to the other outputs).
int run(const std::vector<std::string>& args);

}  // namespace knotcast::cli
