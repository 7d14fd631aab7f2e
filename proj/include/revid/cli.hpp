#pragma once

namespace revid {

// Exit status: 0 success, 1 runtime failure, 2 invalid config or arguments.
int run_cli(int argc, char** argv);

}  // namespace revid
