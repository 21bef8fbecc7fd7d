#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace ami::cli {

inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kNumeric = 3;
inline constexpr int kArtifactMismatch = 4;
inline constexpr int kDataMismatch = 5;

inline constexpr const char* kToolVersion = "1.0.0";

/// FNV-1a 64 of a file's bytes, as 16 lowercase hex digits.
std::string file_fingerprint(const std::string& path);

/// Entry point shared by the executable and the tests. args excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ami::cli
