#include "steward/executor.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "steward/clock.hpp"
#include "steward/digest.hpp"
#include "steward/error.hpp"
#include "steward/path_jail.hpp"

namespace steward {
namespace fs = std::filesystem;
using SteadyClock = std::chrono::steady_clock;

std::string truncation_marker(std::uint64_t omitted_bytes) {
  return "\n[output truncated: " + std::to_string(omitted_bytes) + " bytes omitted]\n";
}

namespace {

struct ExcerptLayout {
  std::size_t head = 0;
  std::size_t tail = 0;
  std::string marker;
};

// Splits cap between head, marker and tail for a stream of total bytes.
// The marker length depends on the omitted count, so settle it in two passes.
ExcerptLayout layout_for(std::uint64_t total, std::size_t cap) {
  ExcerptLayout l;
  std::size_t keep = cap - std::min(cap, truncation_marker(total).size());
  l.marker = truncation_marker(total - keep);
  keep = cap - std::min(cap, l.marker.size());
  l.marker = truncation_marker(total - keep);
  l.head = keep / 2;
  l.tail = keep - l.head;
  return l;
}

}  // namespace

std::string excerpt(std::string_view data, std::size_t cap) {
  if (data.size() <= cap) return std::string(data);
  const ExcerptLayout l = layout_for(data.size(), cap);
  std::string out;
  out.reserve(cap);
  out.append(data.substr(0, l.head));
  out.append(l.marker);
  out.append(data.substr(data.size() - l.tail));
  return out;
}

std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::kRunning: return "running";
    case JobState::kExited: return "exited";
    case JobState::kKilled: return "killed";
  }
  return "running";
}

namespace {

std::string os_error(const std::string& what) { return what + ": " + std::strerror(errno); }

// Keeps the first and last `cap` bytes of a stream plus its total length.
class Capture {
 public:
  explicit Capture(std::size_t cap) : cap_(cap) {}

  void add(std::string_view chunk) {
    total_ += chunk.size();
    if (head_.size() < cap_) {
      const std::size_t take = std::min(cap_ - head_.size(), chunk.size());
      head_.append(chunk.substr(0, take));
    }
    tail_.append(chunk);
    if (tail_.size() > 2 * cap_) tail_.erase(0, tail_.size() - cap_);
  }

  std::uint64_t total() const { return total_; }
  bool truncated() const { return total_ > cap_; }

  std::string result() const {
    if (total_ <= cap_) return head_;
    const ExcerptLayout l = layout_for(total_, cap_);
    std::string out;
    out.append(std::string_view(head_).substr(0, l.head));
    out.append(l.marker);
    out.append(std::string_view(tail_).substr(tail_.size() - l.tail));
    return out;
  }

 private:
  std::size_t cap_;
  std::string head_;
  std::string tail_;
  std::uint64_t total_ = 0;
};

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIo, os_error("log write failed"));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

int decode_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return -1;
}

int open_log(const fs::path& path) {
  fs::create_directories(path.parent_path());
  int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::kIo, os_error("cannot open log " + path.string()));
  return fd;
}

}  // namespace

// Everything the child needs, built before fork so the child only makes
// async-signal-safe calls.
struct Executor::Prepared {
  fs::path cwd;
  std::vector<std::string> env_storage;
  std::vector<char*> envp;
  std::vector<std::string> argv_storage;
  std::vector<char*> argv;
  std::chrono::milliseconds timeout;

  void finalize() {
    for (auto& s : env_storage) envp.push_back(s.data());
    envp.push_back(nullptr);
    for (auto& s : argv_storage) argv.push_back(s.data());
    argv.push_back(nullptr);
  }
};

Executor::Executor(const Workspace& workspace, RunConfig config)
    : workspace_(workspace), config_(std::move(config)) {}

Executor::~Executor() { kill_all(); }

Executor::Prepared Executor::prepare(const ExecutionRequest& request) const {
  if (request.command.empty()) throw Error(ErrorCode::kInvalidArgument, "empty command");
  Prepared p;
  const std::string dir =
      request.working_dir.empty() ? workspace_.task_dir_relative(request.task) : request.working_dir;
  p.cwd = workspace_.resolve(dir);
  if (request.working_dir.empty()) fs::create_directories(p.cwd);
  std::error_code ec;
  if (!fs::is_directory(p.cwd, ec)) {
    throw Error(ErrorCode::kNotFound, "working directory does not exist: " + dir);
  }
  p.timeout = request.timeout.count() > 0 ? request.timeout : config_.tool_timeout;
  if (p.timeout > config_.max_tool_timeout) {
    throw Error(ErrorCode::kInvalidArgument, "timeout exceeds the configured maximum");
  }
  const auto& allow = request.env_allowlist.empty() ? config_.env_allowlist : request.env_allowlist;
  for (const auto& name : allow) {
    if (const char* v = std::getenv(name.c_str())) p.env_storage.push_back(name + "=" + v);
  }
  p.env_storage.push_back("STEWARD_WORKSPACE=" + workspace_.root().string());
  p.env_storage.push_back("STEWARD_SHARED=" + workspace_.layout().shared.string());
  p.env_storage.push_back("STEWARD_TASK_DIR=" + workspace_.task_dir(request.task).string());
  p.argv_storage = {"/bin/sh", "-c", request.command};
  p.finalize();
  return p;
}

namespace {

// Forks /bin/sh in its own process group with stdout/stderr on the given fds.
pid_t spawn_child(const fs::path& cwd, char* const* argv, char* const* envp, int out_fd,
                  int err_fd) {
  pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::kSpawn, os_error("fork failed"));
  if (pid == 0) {
    ::setpgid(0, 0);
    ::signal(SIGPIPE, SIG_DFL);
    int devnull = ::open("/dev/null", O_RDONLY);
    if (devnull >= 0) ::dup2(devnull, STDIN_FILENO);
    ::dup2(out_fd, STDOUT_FILENO);
    ::dup2(err_fd, STDERR_FILENO);
    if (::chdir(cwd.c_str()) != 0) ::_exit(126);
    ::execve(argv[0], argv, envp);
    ::_exit(127);
  }
  ::setpgid(pid, pid);  // also set from the parent to close the race
  return pid;
}

}  // namespace

ExecutionOutcome Executor::run_command(const ExecutionRequest& request) {
  Prepared p = prepare(request);
  const fs::path log_path =
      workspace_.task_dir(request.task) / "logs" / ("step-" + std::to_string(request.step_no) + ".log");
  int log_fd = open_log(log_path);

  int out_pipe[2];
  int err_pipe[2];
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(log_fd);
    throw Error(ErrorCode::kSpawn, os_error("pipe failed"));
  }
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::close(log_fd);
    throw Error(ErrorCode::kSpawn, os_error("pipe failed"));
  }

  const auto start = SteadyClock::now();
  pid_t pid;
  {
    std::lock_guard lock(mu_);
    try {
      pid = spawn_child(p.cwd, p.argv.data(), p.envp.data(), out_pipe[1], err_pipe[1]);
    } catch (...) {
      for (int fd : {out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1], log_fd}) ::close(fd);
      throw;
    }
    running_.emplace(request.owner, pid);
  }
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);

  Capture out(config_.output_truncation);
  Capture err(config_.output_truncation);
  ExecutionOutcome outcome;
  const auto deadline = start + p.timeout;
  std::optional<SteadyClock::time_point> drain_deadline;
  bool child_done = false;
  int status = 0;
  pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
  int open_fds = 2;
  char buf[65536];

  while (open_fds > 0) {
    const auto now = SteadyClock::now();
    if (!child_done && !outcome.timed_out && now >= deadline) {
      outcome.timed_out = true;
      ::kill(-pid, SIGKILL);
    }
    if (drain_deadline && now >= *drain_deadline) break;
    auto limit = drain_deadline ? *drain_deadline : deadline;
    if (outcome.timed_out && !drain_deadline) {
      drain_deadline = now + std::chrono::seconds(2);
      limit = *drain_deadline;
    }
    const auto wait_ms = std::clamp<long long>(
        std::chrono::duration_cast<std::chrono::milliseconds>(limit - now).count(), 0, 100);
    int rc = ::poll(fds, 2, static_cast<int>(wait_ms));
    if (rc < 0 && errno != EINTR) break;
    for (int i = 0; i < 2; ++i) {
      if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      ssize_t n = ::read(fds[i].fd, buf, sizeof buf);
      if (n > 0) {
        std::string_view chunk(buf, static_cast<std::size_t>(n));
        write_all(log_fd, chunk);
        (i == 0 ? out : err).add(chunk);
      } else if (n == 0 || (n < 0 && errno != EINTR && errno != EAGAIN)) {
        ::close(fds[i].fd);
        fds[i].fd = -1;
        --open_fds;
      }
    }
    if (!child_done) {
      pid_t r = ::waitpid(pid, &status, WNOHANG);
      if (r == pid) {
        child_done = true;
        // Background processes left in the group would hold the pipes open.
        ::kill(-pid, SIGKILL);
        if (!drain_deadline) drain_deadline = SteadyClock::now() + std::chrono::seconds(2);
      }
    }
  }
  for (auto& f : fds) {
    if (f.fd >= 0) ::close(f.fd);
  }
  ::kill(-pid, SIGKILL);
  if (!child_done) ::waitpid(pid, &status, 0);
  ::close(log_fd);

  {
    std::lock_guard lock(mu_);
    for (auto it = running_.begin(); it != running_.end(); ++it) {
      if (it->second == pid) {
        running_.erase(it);
        break;
      }
    }
    if (cancelled_.erase(pid) > 0) outcome.cancelled = true;
  }

  outcome.exit_code = decode_status(status);
  outcome.duration = std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - start);
  outcome.stdout_excerpt = out.result();
  outcome.stderr_excerpt = err.result();
  outcome.stdout_truncated = out.truncated();
  outcome.stderr_truncated = err.truncated();
  outcome.stdout_bytes = out.total();
  outcome.stderr_bytes = err.total();
  outcome.log_path = workspace_.jail().relative(log_path);
  return outcome;
}

JobHandle Executor::spawn_job(const ExecutionRequest& request) {
  Prepared p = prepare(request);
  std::lock_guard lock(mu_);
  const fs::path jobs_dir = workspace_.task_dir(request.task) / "jobs";
  std::string job_id;
  fs::path log_path;
  std::error_code ec;
  do {
    job_id = to_string(request.task) + "." + std::to_string(++job_counters_[request.task]);
    log_path = jobs_dir / (job_id + ".log");
  } while (fs::exists(log_path, ec) || jobs_.count(job_id) > 0);

  int log_fd = open_log(log_path);
  pid_t pid;
  try {
    pid = spawn_child(p.cwd, p.argv.data(), p.envp.data(), log_fd, log_fd);
  } catch (...) {
    ::close(log_fd);
    throw;
  }
  ::close(log_fd);

  Job job;
  job.pid = pid;
  job.handle.job_id = job_id;
  job.handle.command = request.command;
  job.handle.started_at = SystemClock().now();
  job.handle.log_path = workspace_.jail().relative(log_path);
  job.handle.task = request.task;
  job.handle.owner = request.owner;
  jobs_.emplace(job_id, job);
  return job.handle;
}

void Executor::refresh(Job& job) {
  if (job.reaped) return;
  int status = 0;
  pid_t r = ::waitpid(job.pid, &status, WNOHANG);
  if (r == job.pid) {
    job.reaped = true;
    ::kill(-job.pid, SIGKILL);  // leftovers in the job's group
    if (job.handle.status == JobState::kRunning) {
      job.handle.status = JobState::kExited;
      job.handle.exit_code = decode_status(status);
    }
  }
}

void Executor::terminate(Job& job) {
  if (job.reaped) return;
  ::kill(-job.pid, SIGKILL);
  int status = 0;
  ::waitpid(job.pid, &status, 0);
  job.reaped = true;
  if (job.handle.status == JobState::kRunning) {
    job.handle.status = JobState::kKilled;
    job.handle.exit_code = decode_status(status);
  }
}

JobPoll Executor::poll_job(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw Error(ErrorCode::kNotFound, "unknown job: " + job_id);
  refresh(it->second);
  JobPoll out{it->second.handle, {}};
  const fs::path log = workspace_.root() / it->second.handle.log_path;
  std::error_code ec;
  const auto size = fs::file_size(log, ec);
  if (!ec && size > 0) {
    const std::uint64_t cap = std::min<std::uint64_t>(config_.output_truncation, 4096);
    const std::uint64_t from = size > cap ? size - cap : 0;
    int fd = ::open(log.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd >= 0) {
      std::string tail(size - from, '\0');
      ssize_t n = ::pread(fd, tail.data(), tail.size(), static_cast<off_t>(from));
      ::close(fd);
      if (n > 0) {
        tail.resize(static_cast<std::size_t>(n));
        out.log_tail = std::move(tail);
      }
    }
  }
  return out;
}

JobHandle Executor::kill_job(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw Error(ErrorCode::kNotFound, "unknown job: " + job_id);
  refresh(it->second);
  terminate(it->second);
  return it->second.handle;
}

JobHandle Executor::wait_job(const std::string& job_id, std::chrono::milliseconds timeout) {
  const auto deadline = SteadyClock::now() + timeout;
  const auto interval = std::min<std::chrono::milliseconds>(config_.job_poll_interval,
                                                            std::chrono::milliseconds(50));
  while (true) {
    {
      std::lock_guard lock(mu_);
      auto it = jobs_.find(job_id);
      if (it == jobs_.end()) throw Error(ErrorCode::kNotFound, "unknown job: " + job_id);
      refresh(it->second);
      if (it->second.handle.status != JobState::kRunning || SteadyClock::now() >= deadline) {
        return it->second.handle;
      }
    }
    std::this_thread::sleep_for(interval);
  }
}

std::vector<JobHandle> Executor::jobs() const {
  std::lock_guard lock(mu_);
  std::vector<JobHandle> out;
  for (const auto& [id, job] : jobs_) out.push_back(job.handle);
  return out;
}

ReadResult Executor::read_file(std::string_view path,
                               std::optional<std::pair<std::uint64_t, std::uint64_t>> range) {
  const fs::path p = workspace_.resolve(path);
  std::string bytes = read_file_bytes(p);
  if (!range) return {std::move(bytes), false};
  const auto [begin, end] = *range;
  if (end < begin) throw Error(ErrorCode::kInvalidArgument, "byte range end precedes start");
  if (begin >= bytes.size()) return {"", end > begin};
  const std::uint64_t stop = std::min<std::uint64_t>(end, bytes.size());
  return {bytes.substr(begin, stop - begin), stop < end};
}

std::string Executor::write_file(std::string_view path, std::string_view bytes) {
  const fs::path p = workspace_.resolve(path);
  fs::create_directories(p.parent_path());
  write_file_atomic(p, bytes, nullptr, config_.sync_journal);
  return sha256_hex(bytes);
}

void Executor::cancel_owner(const std::string& owner) {
  std::lock_guard lock(mu_);
  auto [lo, hi] = running_.equal_range(owner);
  for (auto it = lo; it != hi; ++it) {
    cancelled_.insert(it->second);
    ::kill(-it->second, SIGKILL);
  }
  for (auto& [id, job] : jobs_) {
    if (job.handle.owner != owner) continue;
    refresh(job);
    terminate(job);
  }
}

void Executor::kill_all() {
  std::lock_guard lock(mu_);
  for (const auto& [owner, pid] : running_) {
    cancelled_.insert(pid);
    ::kill(-pid, SIGKILL);
  }
  for (auto& [id, job] : jobs_) {
    refresh(job);
    terminate(job);
  }
}

}  // namespace steward
