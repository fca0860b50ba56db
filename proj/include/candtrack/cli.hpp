#pragma once

namespace candtrack {

// Exit codes: 0 success, 1 other failure, 2 invalid config/format/arguments,
// 3 numerical failure.
int run_cli(int argc, char** argv);

}  // namespace candtrack
