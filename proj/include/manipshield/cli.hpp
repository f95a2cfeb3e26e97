#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace manipshield::cli {

// Runs one command line (without the program name). Returns the exit status:
// 0 on success, 2 on I/O errors, 1 on anything else including bad usage.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace manipshield::cli
