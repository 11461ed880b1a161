#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mmfusion/error.hpp"

namespace mmfusion::cli {

/// 1 for configuration and shape problems, 2 for unreadable or malformed inputs,
/// 3 for numeric, oracle and training failures.
int exit_code(ErrorKind kind);

/// One machine-parseable line: error kind=<kind> code=<n> message="<text>"
std::string error_line(ErrorKind kind, const std::string& message);

/// Runs one command line; `args` excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmfusion::cli
