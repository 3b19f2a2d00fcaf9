#ifndef FOCALCONV_CLI_HPP
#define FOCALCONV_CLI_HPP

#include <string>
#include <vector>

namespace focalconv::cli {

// Exit codes: 0 success, 1 domain error (bad data/config/numerics),
// 2 usage error (bad flags/subcommand).
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace focalconv::cli

#endif
