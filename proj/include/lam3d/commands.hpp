#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lam3d {

// Command-line entry point. Exit codes: 0 ok, 1 usage or config, 2
// numerical failure (including failed self-checks), 3 IO.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace lam3d
