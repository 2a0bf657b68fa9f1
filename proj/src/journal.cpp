#include "steward/journal.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "steward/error.hpp"
#include "steward/serialize.hpp"

namespace steward {
namespace fs = std::filesystem;

namespace {

std::string errno_text() { return std::strerror(errno); }

void write_all(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIo, "journal write failed for " + path.string() + ": " + errno_text());
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

int take_lock(const fs::path& journal_path) {
  const fs::path lock_path = journal_path.parent_path() / "events.lock";
  int fd = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) {
    throw Error(ErrorCode::kIo, "cannot open journal lock " + lock_path.string() + ": " +
                                    errno_text());
  }
  if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd);
    throw Error(ErrorCode::kConflict,
                "journal " + journal_path.string() + " is held by another engine instance");
  }
  return fd;
}

}  // namespace

Journal::Journal(fs::path path, int fd, int lock_fd, std::uint64_t last_seq, bool sync)
    : path_(std::move(path)), fd_(fd), lock_fd_(lock_fd), last_seq_(last_seq), sync_(sync) {}

Journal::Journal(Journal&& other) noexcept
    : path_(std::move(other.path_)),
      fd_(std::exchange(other.fd_, -1)),
      lock_fd_(std::exchange(other.lock_fd_, -1)),
      last_seq_(other.last_seq_),
      sync_(other.sync_),
      fault_(other.fault_) {}

Journal& Journal::operator=(Journal&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    if (lock_fd_ >= 0) ::close(lock_fd_);
    path_ = std::move(other.path_);
    fd_ = std::exchange(other.fd_, -1);
    lock_fd_ = std::exchange(other.lock_fd_, -1);
    last_seq_ = other.last_seq_;
    sync_ = other.sync_;
    fault_ = other.fault_;
  }
  return *this;
}

Journal::~Journal() {
  if (fd_ >= 0) ::close(fd_);
  if (lock_fd_ >= 0) ::close(lock_fd_);
}

Journal Journal::create(const fs::path& path, const std::string& project_id, bool sync) {
  if (fs::exists(path)) {
    throw Error(ErrorCode::kAlreadyExists, "journal already exists: " + path.string());
  }
  int lock_fd = take_lock(path);
  int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) {
    ::close(lock_fd);
    throw Error(errno == EACCES ? ErrorCode::kPermissionDenied : ErrorCode::kIo,
                "cannot create journal " + path.string() + ": " + errno_text());
  }
  json header{{"schema", kJournalSchema},
              {"version", kJournalSchemaVersion},
              {"project_id", project_id}};
  Journal j(path, fd, lock_fd, 0, sync);
  write_all(fd, header.dump() + "\n", path);
  if (sync) ::fsync(fd);
  return j;
}

Journal Journal::open(const fs::path& path, bool sync) {
  int lock_fd = take_lock(path);
  try {
    auto contents = read(path);
    int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (fd < 0) {
      throw Error(ErrorCode::kIo, "cannot open journal " + path.string() + ": " + errno_text());
    }
    const std::uint64_t last = contents.events.empty() ? 0 : contents.events.back().sequence_no;
    return Journal(path, fd, lock_fd, last, sync);
  } catch (...) {
    ::close(lock_fd);
    throw;
  }
}

JournalContents Journal::read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "no journal at " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  JournalContents out;
  if (data.empty()) throw Error(ErrorCode::kCorruptJournal, "journal is empty: " + path.string());
  if (data.back() != '\n') {
    auto line_no = std::count(data.begin(), data.end(), '\n') + 1;
    throw Error(ErrorCode::kCorruptJournal,
                "torn record at line " + std::to_string(line_no) + " of " + path.string() +
                    " (no LF terminator); refusing to truncate");
  }
  std::size_t pos = 0;
  std::size_t line_no = 0;
  std::uint64_t expected = 1;
  while (pos < data.size()) {
    const std::size_t end = data.find('\n', pos);
    std::string_view line(data.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line_no == 1) {
      json header;
      try {
        header = json::parse(line);
      } catch (const json::exception& e) {
        throw Error(ErrorCode::kCorruptJournal, "bad journal header: " + std::string(e.what()));
      }
      if (header.value("schema", "") != kJournalSchema ||
          header.value("version", 0) != kJournalSchemaVersion) {
        throw Error(ErrorCode::kCorruptJournal, "unsupported journal schema in " + path.string());
      }
      out.project_id = header.value("project_id", "");
      continue;
    }
    Event e;
    try {
      e = parse_event(line);
    } catch (const Error& err) {
      throw Error(ErrorCode::kCorruptJournal,
                  "line " + std::to_string(line_no) + ": " + err.what());
    }
    if (e.sequence_no != expected) {
      throw Error(ErrorCode::kCorruptJournal,
                  "line " + std::to_string(line_no) + ": expected sequence " +
                      std::to_string(expected) + ", found " + std::to_string(e.sequence_no));
    }
    ++expected;
    out.lines.emplace_back(line);
    out.events.push_back(std::move(e));
  }
  return out;
}

std::pair<Event, std::string> Journal::append(EventPayload payload, std::string timestamp) {
  std::lock_guard lock(mu_);
  if (fd_ < 0) throw Error(ErrorCode::kFailedPrecondition, "journal is closed");
  Event e{last_seq_ + 1, std::move(timestamp), std::move(payload)};
  std::string line = serialize_event(e);
  fault_point(fault_, "journal.append");
  write_all(fd_, line + "\n", path_);
  if (sync_ && ::fdatasync(fd_) != 0) {
    throw Error(ErrorCode::kIo, "journal sync failed: " + errno_text());
  }
  last_seq_ = e.sequence_no;
  fault_point(fault_, "journal.appended");
  return {std::move(e), std::move(line)};
}

std::uint64_t Journal::last_sequence_no() const {
  std::lock_guard lock(mu_);
  return last_seq_;
}

}  // namespace steward
