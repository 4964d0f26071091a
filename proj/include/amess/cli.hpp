#pragma once

#include <iosfwd>

namespace amess {

/// Entry point of the `amess` tool. Returns 0 on success, 1 on a runtime
/// failure and 2 on a usage error. Errors are printed to `err` as a single
/// line `error[<code>]: <message>`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace amess
