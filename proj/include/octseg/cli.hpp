#pragma once

namespace octseg::cli {

// Entry point shared by the octseg binary and the CLI tests.
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
int run(int argc, const char* const* argv);

} // namespace octseg::cli
