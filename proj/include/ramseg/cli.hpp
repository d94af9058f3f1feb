#pragma once

namespace ramseg {

// Entry point of the `ramseg` command. Returns the process exit status:
// 0 on success, 1 on a pipeline error, 2 on a usage error.
int cli_main(int argc, char** argv);

}  // namespace ramseg
