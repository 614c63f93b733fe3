#pragma once

#include <string>

namespace banet::testing {

struct CliResult {
    int code = -1;
    std::string out;  // stdout only; stderr is discarded
};

// Runs the built banet CLI with `args` appended, through the shell.
CliResult run_cli(const std::string& args);

}  // namespace banet::testing
