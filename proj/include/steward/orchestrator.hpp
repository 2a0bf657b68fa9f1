#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "steward/backend.hpp"
#include "steward/clock.hpp"
#include "steward/executor.hpp"
#include "steward/fault.hpp"
#include "steward/journal.hpp"
#include "steward/planner.hpp"
#include "steward/state.hpp"
#include "steward/worker.hpp"
#include "steward/workspace.hpp"

namespace steward {

struct Backends {
  Backend* planner = nullptr;
  Backend* worker = nullptr;
  Backend* assessor = nullptr;

  // Same backend for every role.
  static Backends all(Backend& b) { return {&b, &b, &b}; }
};

enum class RunStatus { kCompleted, kHalted, kFatal };
std::string_view to_string(RunStatus s);

struct RunOutcome {
  RunStatus status = RunStatus::kFatal;
  std::optional<HaltRecord> halt;
  std::string detail;
};

using ToolHostFactory = std::function<std::unique_ptr<ToolHost>(Executor&, TaskId)>;

struct OrchestratorOptions {
  Clock* clock = nullptr;            // SystemClock when null
  FaultInjector* fault = nullptr;
  ToolHostFactory tool_hosts;        // ExecutorToolHost when empty
  bool write_transcripts = true;     // tasks/<id>/transcript.attempt-<n>.jsonl
  std::chrono::milliseconds idle_poll{100};
  std::string actor = "operator";
};

// A halt requested from another process while a run holds the journal.
std::filesystem::path halt_request_path(const Workspace& workspace);
void write_halt_request(const Workspace& workspace, const std::string& reason);

// Owns the journal writer and the in-memory fold for one project. Every state
// transition goes through record(), which checks it against a copy of the
// state before appending. run() is the scheduler; worker and assessor calls
// run on their own threads and report back through a completion queue.
class Orchestrator {
 public:
  Orchestrator(Workspace& workspace, Journal journal, Backends backends, RunConfig config,
               OrchestratorOptions options = {});
  ~Orchestrator();
  Orchestrator(const Orchestrator&) = delete;
  Orchestrator& operator=(const Orchestrator&) = delete;

  ProjectState state() const;
  const RunConfig& config() const { return config_; }
  Workspace& workspace() { return workspace_; }
  Executor& executor() { return *executor_; }

  // Persists plan/version-<n>.json, then journals PlanProposed.
  Event propose(Plan plan, std::optional<std::string> resume_instruction = std::nullopt);
  // Runs the planner; a rejection comment from the journal is carried into
  // the new round. Nothing is journaled when the user abandons.
  PlanningSession plan(const ProjectSpec& spec, InteractionChannel& channel);
  // Approval of a resume plan also journals ProjectResumed.
  ApprovalOutcome decide(int version, Decision decision, const std::string& actor,
                         const std::string& comment = {});
  // Halted projects only: proposes version+1 for the instruction.
  Event propose_resume(const std::string& instruction);
  // Journals ProjectHalted directly. Only valid while no run is active.
  Event halt(const std::string& reason, const std::string& issued_by);

  // Recovers from the journal, then schedules until Completed, Halted or a
  // fatal error. Fatal errors are reported, never swallowed into Halted.
  RunOutcome run();
  bool running() const;
  // Thread-safe; picked up by the scheduler of an active run.
  void request_halt(const std::string& reason, const std::string& issued_by = "operator");

  // Observes every appended event with its serialized journal line.
  using Listener = std::function<void(const Event&, const std::string&)>;
  void set_listener(Listener listener);

  // Most recent rejection comment for the latest proposal round, if any.
  std::optional<std::string> last_rejection_comment() const;

 private:
  struct Attempt;
  struct Message;
  class Scheduler;

  Event record(EventPayload payload);

  Workspace& workspace_;
  Journal journal_;
  Backends backends_;
  RunConfig config_;
  OrchestratorOptions options_;
  std::unique_ptr<Clock> owned_clock_;
  std::unique_ptr<Executor> executor_;

  mutable std::mutex mu_;  // guards state_, journal_ and listener_
  ProjectState state_;
  std::vector<Event> events_;
  Listener listener_;
  bool running_ = false;

  std::mutex halt_mu_;  // guards halt_requested_ and active_
  std::optional<std::pair<std::string, std::string>> halt_requested_;
  Scheduler* active_ = nullptr;
};

}  // namespace steward
