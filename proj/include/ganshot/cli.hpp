#pragma once

#include <string>
#include <vector>

namespace ganshot {

// Executes one subcommand; returns the process exit code.
int run_command(const std::vector<std::string>& args);

}  // namespace ganshot
