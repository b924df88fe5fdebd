#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace twophase::cli {

// Runs the `twophase` command line. Documents go to `out`, error documents to
// `err`. Returns the process exit code: 0 success, 2 validation, 3 numeric.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace twophase::cli
