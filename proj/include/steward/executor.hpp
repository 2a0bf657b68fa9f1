#pragma once

#include <sys/types.h>

#include <chrono>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "steward/types.hpp"
#include "steward/workspace.hpp"

namespace steward {

// Inserted between the head and tail of a truncated excerpt.
// Bit-exact: "\n[output truncated: <N> bytes omitted]\n".
std::string truncation_marker(std::uint64_t omitted_bytes);

// Head + marker + tail, never longer than cap. Returns the input unchanged
// when it fits.
std::string excerpt(std::string_view data, std::size_t cap);

struct ExecutionRequest {
  std::string command;
  std::string working_dir;  // workspace-relative; empty means tasks/<task>
  std::chrono::milliseconds timeout{0};  // 0 means the configured default
  std::vector<std::string> env_allowlist;  // empty means the configured list
  TaskId task;
  int step_no = 0;
  std::string owner;  // cancellation tag, usually "<task>.<attempt>"
};

struct ExecutionOutcome {
  int exit_code = 0;  // 128 + signal when killed by a signal
  std::string stdout_excerpt;
  std::string stderr_excerpt;
  std::chrono::milliseconds duration{0};
  bool timed_out = false;
  bool cancelled = false;
  bool stdout_truncated = false;
  bool stderr_truncated = false;
  std::uint64_t stdout_bytes = 0;
  std::uint64_t stderr_bytes = 0;
  std::string log_path;  // workspace-relative

  bool ok() const { return exit_code == 0 && !timed_out && !cancelled; }
};

enum class JobState { kRunning, kExited, kKilled };
std::string_view to_string(JobState s);

struct JobHandle {
  std::string job_id;
  std::string command;
  std::string started_at;
  JobState status = JobState::kRunning;
  int exit_code = 0;
  std::string log_path;  // workspace-relative, tasks/<id>/jobs/<job_id>.log
  TaskId task;
  std::string owner;
};

struct JobPoll {
  JobHandle handle;
  std::string log_tail;
};

struct ReadResult {
  std::string bytes;
  bool short_read = false;
};

// Shared, thread-safe tool executor confined to one workspace.
class Executor {
 public:
  Executor(const Workspace& workspace, RunConfig config);
  ~Executor();
  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  ExecutionOutcome run_command(const ExecutionRequest& request);

  JobHandle spawn_job(const ExecutionRequest& request);
  JobPoll poll_job(const std::string& job_id);
  JobHandle kill_job(const std::string& job_id);
  // Blocks until the job leaves Running or the timeout passes.
  JobHandle wait_job(const std::string& job_id, std::chrono::milliseconds timeout);
  std::vector<JobHandle> jobs() const;

  ReadResult read_file(std::string_view path,
                       std::optional<std::pair<std::uint64_t, std::uint64_t>> range = {});
  // Atomic write; returns the SHA-256 of the bytes.
  std::string write_file(std::string_view path, std::string_view bytes);

  // Kills every command and job tagged with owner.
  void cancel_owner(const std::string& owner);
  void kill_all();

  const Workspace& workspace() const { return workspace_; }
  const RunConfig& config() const { return config_; }

 private:
  struct Job {
    JobHandle handle;
    pid_t pid = -1;
    bool reaped = false;
  };
  struct Prepared;

  Prepared prepare(const ExecutionRequest& request) const;
  void refresh(Job& job);  // requires mu_
  void terminate(Job& job);  // requires mu_

  const Workspace& workspace_;
  RunConfig config_;
  mutable std::mutex mu_;
  std::map<std::string, Job> jobs_;
  std::map<TaskId, int> job_counters_;
  std::multimap<std::string, pid_t> running_;  // owner -> process group
  std::set<pid_t> cancelled_;
};

}  // namespace steward
