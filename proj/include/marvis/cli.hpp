#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace marvis {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 1 on usage errors, 2 on data/format errors and 3 on numeric
/// failures.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace marvis
