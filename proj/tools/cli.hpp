#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace prompt_evolve::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitIo = 3;

// Full command line including the program name in args[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace prompt_evolve::cli
