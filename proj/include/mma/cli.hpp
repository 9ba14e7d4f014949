#pragma once

#include <filesystem>
#include <ostream>

namespace mma {

// Exclusive ownership of a run directory for one process, via an
// O_EXCL-created ".lock" file removed on destruction.
class RunDirLock {
 public:
  explicit RunDirLock(const std::filesystem::path& dir);
  ~RunDirLock();
  RunDirLock(const RunDirLock&) = delete;
  RunDirLock& operator=(const RunDirLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Subcommands: train, attack-only, defend, evaluate, report, selfcheck.
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 aborted training.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mma
