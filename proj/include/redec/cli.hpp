#pragma once

#include <string>
#include <vector>

namespace redec {

// Full command-line surface (gen / train / eval / ablate / gradcheck).
// Returns the process exit code: 0 success, 1 usage error, 2 data or format
// error, 3 numerical failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace redec
