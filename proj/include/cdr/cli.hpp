#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cdr {

/// Runs one `cdr_biqa` command. `args` excludes the program name. JSON
/// results go to `out` (only when --json is set), everything else to `err`.
/// Returns the process exit code: 0 ok, 1 usage, 2 data, 3 numerical.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace cdr
