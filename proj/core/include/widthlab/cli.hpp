#pragma once

#include <string>
#include <vector>

namespace widthlab {

// Operator surface. Subcommands: train-parent, widen, probe, continue,
// study, report. Returns 0 on success, 1 on runtime failure, 2 on
// usage/config errors. Logs to stderr; data goes to files only.
int cli_main(const std::vector<std::string>& args);

}  // namespace widthlab
