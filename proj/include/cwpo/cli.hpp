#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cwpo {

// Entry point of the `cwpo` tool. Results go to `out` as JSON lines (the
// first echoes the resolved config); failures print one JSON error object on
// `err`. Returns 0 on success, 1 on runtime failure, 2 on usage or config
// errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cwpo
