#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "steward/fault.hpp"

namespace steward {

// Confines workspace-relative paths to a root directory. Rejection happens
// before anything touches the target: absolute inputs and any ".." segment
// are refused lexically, then symlinks are resolved and the result must
// still lie under the root.
class PathJail {
 public:
  explicit PathJail(const std::filesystem::path& root);

  std::filesystem::path resolve(std::string_view relative) const;
  bool contains(const std::filesystem::path& absolute) const;
  std::string relative(const std::filesystem::path& absolute) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

// temp file + fsync + rename in the destination directory.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes,
                       FaultInjector* fault = nullptr, bool sync = true);

std::string read_file_bytes(const std::filesystem::path& path);

}  // namespace steward
