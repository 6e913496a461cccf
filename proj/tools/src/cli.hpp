#pragma once

#include <iosfwd>

namespace qttt::cli {

/// Entry point shared by the binary and in-process tests. Returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qttt::cli
