#pragma once

#include <string>
#include <vector>

namespace dtu {

inline constexpr const char* kToolVersion = "0.1.0";

// Runs one CLI command (train | eval | predict | gradcheck | ablate | synth).
// Returns the process exit code: 0 success, 1 usage error, 2 data error,
// 3 numeric failure.
int dispatch(const std::vector<std::string>& args);

}  // namespace dtu
