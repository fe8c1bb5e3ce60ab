#pragma once

#include <iosfwd>
#include <stdexcept>

namespace seqchat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VocabMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Entry point for the `seqchat` command. Returns the process exit code:
// 0 success, 1 runtime failure (divergence, vocabulary mismatch), 2 usage or
// I/O error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, std::istream& in);

}  // namespace seqchat
