#pragma once

#include <string>
#include <vector>

namespace gaitplan::cli {

// Exit codes: 0 success, 1 usage/config error, 2 prerequisite error,
// 3 numerical divergence.
int run(const std::vector<std::string>& args);

int main_entry(int argc, char** argv);

}  // namespace gaitplan::cli
