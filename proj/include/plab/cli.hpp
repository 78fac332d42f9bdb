#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace plab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitMissingInput = 3;
inline constexpr int kExitInvariant = 4;

inline constexpr const char* kVersion = "1.0.0";

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace plab::cli
