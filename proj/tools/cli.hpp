#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace osrm::cli {

/// Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace osrm::cli
