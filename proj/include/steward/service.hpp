#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "steward/orchestrator.hpp"

namespace steward {

// Read-only views. Each is a function of the journal (and, for task detail,
// of the files the engine wrote under the workspace).
nlohmann::json api_snapshot(const std::string& project_id, const ProjectState& state);
std::string render_status(const nlohmann::json& snapshot);
nlohmann::json plan_document(const Workspace& workspace, const ProjectState& state,
                             const std::vector<Event>& events, int version);
nlohmann::json task_detail(const Workspace& workspace, const ProjectState& state,
                           const std::vector<Event>& events, TaskId id);

// One project behind the API. Owns an Orchestrator when the journal writer
// lock is free; otherwise the host is read-only and follows the file.
class ProjectHost {
 public:
  struct Options {
    Backends backends;
    std::optional<RunConfig> config;  // project config when unset
    OrchestratorOptions orchestrator;
    bool auto_run = true;  // start a run after an approval that allows one
  };

  ProjectHost(const std::filesystem::path& root, Options options);
  ~ProjectHost();
  ProjectHost(const ProjectHost&) = delete;
  ProjectHost& operator=(const ProjectHost&) = delete;

  const std::string& project_id() const { return project_id_; }
  bool writable() const { return orchestrator_ != nullptr; }
  Orchestrator* orchestrator() { return orchestrator_.get(); }
  Workspace& workspace() { return *workspace_; }

  ProjectState state() const;
  nlohmann::json snapshot() const;
  nlohmann::json list_entry() const;
  nlohmann::json plan(int version) const;
  nlohmann::json task(TaskId id) const;

  // Serialized events with sequence_no > after, in order. Blocks up to `wait`
  // when there are none yet. `idle` reports that no run is active.
  std::vector<std::string> lines_after(std::uint64_t after, std::chrono::milliseconds wait,
                                       bool* idle = nullptr);

  // Commands. Each returns the journaled event(s) as JSON.
  nlohmann::json approve(int version, Decision decision, const std::string& actor,
                         const std::string& comment);
  nlohmann::json resume(const std::string& instruction);
  // Journals directly when idle; hands the request to the scheduler while a
  // run is active and returns {"status":"requested"}.
  nlohmann::json halt(const std::string& reason);

  // Starts run() on a background thread when the project can make progress.
  bool start_run();
  bool running() const;
  // Blocks until the current run (if any) ends.
  std::optional<RunOutcome> wait_run();
  std::optional<RunOutcome> last_outcome() const;

 private:
  void on_event(const Event& event, const std::string& line);
  void refresh_from_file() const;
  std::vector<Event> events_copy() const;

  std::unique_ptr<Workspace> workspace_;
  std::string project_id_;
  Options options_;
  std::unique_ptr<Orchestrator> orchestrator_;

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  mutable std::vector<Event> events_;
  mutable std::vector<std::string> lines_;
  bool run_active_ = false;
  std::optional<RunOutcome> outcome_;
  std::string run_error_;
  std::thread run_thread_;
};

// HTTP API under /api/projects. Mutations carry an optional request_id; a
// repeated id returns the first response without acting again.
class ApiServer {
 public:
  struct Options {
    std::string token;  // bearer token; empty disables authentication
    std::chrono::milliseconds stream_poll{250};
  };

  explicit ApiServer(Options options);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  void add(std::shared_ptr<ProjectHost> host);

  // Binds and serves on a background thread. Port 0 picks a free port.
  int start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

// Parses "host:port" or ":port" or "port".
std::pair<std::string, int> parse_listen_address(const std::string& text);

// The command line. Returns the process exit status: 0 Completed or success,
// 2 Halted, 1 any error (reported as one line on err).
int run_cli(int argc, char** argv, std::istream& in, std::ostream& out, std::ostream& err);

// SIGINT and SIGTERM ask an active run to halt; a second signal exits.
void install_interrupt_handlers();

}  // namespace steward
