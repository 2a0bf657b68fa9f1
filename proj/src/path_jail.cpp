#include "steward/path_jail.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "steward/error.hpp"

namespace steward {
namespace fs = std::filesystem;

namespace {

bool is_prefix(const fs::path& root, const fs::path& p) {
  auto r = root.begin();
  auto q = p.begin();
  for (; r != root.end(); ++r, ++q) {
    if (q == p.end() || *r != *q) return false;
  }
  return true;
}

}  // namespace

PathJail::PathJail(const fs::path& root) : root_(fs::weakly_canonical(fs::absolute(root))) {}

fs::path PathJail::resolve(std::string_view relative) const {
  const std::string rel(relative);
  if (rel.empty()) throw Error(ErrorCode::kPathEscape, "empty path");
  if (rel.find('\0') != std::string::npos) {
    throw Error(ErrorCode::kPathEscape, "path contains NUL byte");
  }
  fs::path input(rel);
  if (input.is_absolute() || rel.front() == '/' || input.has_root_name()) {
    throw Error(ErrorCode::kPathEscape, "absolute path rejected: " + rel);
  }
  for (const auto& part : input) {
    if (part == "..") throw Error(ErrorCode::kPathEscape, "parent segment rejected: " + rel);
  }

  fs::path p = root_ / input.lexically_normal();
  // Chase symlinks, including a dangling final component, before judging.
  for (int hops = 0; hops < 40; ++hops) {
    std::error_code ec;
    p = fs::weakly_canonical(p, ec);
    if (ec) throw Error(ErrorCode::kPathEscape, "cannot resolve " + rel + ": " + ec.message());
    auto st = fs::symlink_status(p, ec);
    if (ec || !fs::is_symlink(st)) break;
    fs::path target = fs::read_symlink(p, ec);
    if (ec) break;
    p = target.is_absolute() ? target : p.parent_path() / target;
  }
  if (!contains(p)) throw Error(ErrorCode::kPathEscape, "path escapes workspace: " + rel);
  return p;
}

bool PathJail::contains(const fs::path& absolute) const {
  return is_prefix(root_, absolute.lexically_normal());
}

std::string PathJail::relative(const fs::path& absolute) const {
  return fs::path(absolute).lexically_relative(root_).generic_string();
}

void write_file_atomic(const fs::path& path, std::string_view bytes, FaultInjector* fault,
                       bool sync) {
  static std::atomic<unsigned> counter{0};
  const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp-" +
                                             std::to_string(::getpid()) + "-" +
                                             std::to_string(counter.fetch_add(1)));
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) {
    const int err = errno;
    throw Error(err == EACCES ? ErrorCode::kPermissionDenied
                              : (err == ENOENT ? ErrorCode::kNotFound : ErrorCode::kIo),
                "cannot write " + path.string() + ": " + std::strerror(err));
  }
  std::string_view rest = bytes;
  while (!rest.empty()) {
    ssize_t n = ::write(fd, rest.data(), rest.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      ::unlink(tmp.c_str());
      throw Error(ErrorCode::kIo, "write failed for " + path.string() + ": " + std::strerror(err));
    }
    rest.remove_prefix(static_cast<std::size_t>(n));
  }
  if (sync) ::fsync(fd);
  ::close(fd);
  // A crash here leaves the temp file behind and the old content in place.
  fault_point(fault, "write.before_rename");
  if (::rename(tmp.c_str(), path.c_str()) != 0) {
    const int err = errno;
    ::unlink(tmp.c_str());
    throw Error(ErrorCode::kIo, "rename failed for " + path.string() + ": " + std::strerror(err));
  }
  fault_point(fault, "write.after_rename");
}

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::error_code ec;
    if (!fs::exists(path, ec)) throw Error(ErrorCode::kNotFound, "no such file: " + path.string());
    throw Error(ErrorCode::kPermissionDenied, "cannot read " + path.string());
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace steward
