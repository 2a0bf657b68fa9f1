#pragma once

// Domain types shared by every module: plans, task states, summaries,
// verdicts and journal events. All of these are plain values.

#include <chrono>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace steward {

struct TaskId {
  int value = 0;

  constexpr TaskId() = default;
  constexpr explicit TaskId(int v) : value(v) {}

  friend constexpr auto operator<=>(TaskId, TaskId) = default;
};

std::string to_string(TaskId id);

using TaskIdSet = std::set<TaskId>;

struct RunConfig {
  int concurrency_limit = 1;
  int step_budget = 30;            // worker steps per task attempt
  int revise_budget = 2;           // Revise retries per task before escalation
  int assess_reprompt_limit = 2;   // also bounds planner reprompts
  std::chrono::milliseconds tool_timeout{10 * 60 * 1000};
  std::chrono::milliseconds max_tool_timeout{48LL * 3600 * 1000};
  std::size_t output_truncation = 64 * 1024;

  std::size_t context_budget = 512 * 1024;  // worker transcript bytes
  int keep_recent_steps = 10;
  std::size_t summary_cap = 16 * 1024;
  std::size_t evidence_cap = 32 * 1024;
  std::chrono::milliseconds halt_drain{2000};
  std::chrono::milliseconds job_poll_interval{200};
  std::chrono::milliseconds unattended_wait{0};
  std::vector<std::string> env_allowlist{"PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "USER"};
  bool sync_journal = true;
  std::string api_token;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Empty when valid.
std::vector<std::string> validate_config(const RunConfig& config);

struct Attachment {
  std::string path;  // workspace-relative, under shared/
  std::uint64_t byte_length = 0;

  friend bool operator==(const Attachment&, const Attachment&) = default;
};

struct ProjectSpec {
  std::string project_id;
  std::string instruction;
  std::vector<Attachment> attachments;
  RunConfig config;

  friend bool operator==(const ProjectSpec&, const ProjectSpec&) = default;
};

std::vector<std::string> validate_project_spec(const ProjectSpec& spec);

struct TaskSpec {
  TaskId task_id;
  std::string title;
  std::string objective;
  std::vector<std::string> success_criteria;
  TaskIdSet dependencies;
  std::vector<std::string> expected_artifacts;
  std::optional<std::string> hints;
  bool expensive = false;  // triggers a pre-flight assessment before dispatch

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct Plan {
  std::string goal;
  std::vector<TaskSpec> tasks;
  int version = 1;

  const TaskSpec* find(TaskId id) const;
  TaskIdSet task_ids() const;

  friend bool operator==(const Plan&, const Plan&) = default;
};

struct TaskState {
  enum class Kind {
    kPending,
    kReady,
    kRunning,
    kAwaitingAssessment,
    kAccepted,
    kInvalidated,
    kFailed,
    kHaltedWithProject,
  };

  Kind kind = Kind::kPending;
  int attempt = 0;              // Running / AwaitingAssessment
  std::optional<TaskId> cause;  // Invalidated

  static TaskState pending() { return {}; }
  static TaskState running(int attempt) { return {Kind::kRunning, attempt, std::nullopt}; }
  static TaskState awaiting(int attempt) {
    return {Kind::kAwaitingAssessment, attempt, std::nullopt};
  }
  static TaskState accepted() { return {Kind::kAccepted, 0, std::nullopt}; }
  static TaskState invalidated(TaskId cause) { return {Kind::kInvalidated, 0, cause}; }
  static TaskState failed() { return {Kind::kFailed, 0, std::nullopt}; }
  static TaskState halted() { return {Kind::kHaltedWithProject, 0, std::nullopt}; }

  bool is(Kind k) const { return kind == k; }
  bool in_flight() const {
    return kind == Kind::kRunning || kind == Kind::kAwaitingAssessment;
  }

  friend bool operator==(const TaskState&, const TaskState&) = default;
};

std::string_view to_string(TaskState::Kind kind);
std::string describe(const TaskState& state);

using TaskStates = std::map<TaskId, TaskState>;

struct ArtifactEntry {
  std::string path;
  std::string description;

  friend bool operator==(const ArtifactEntry&, const ArtifactEntry&) = default;
};

struct Metric {
  std::string name;
  double value = 0.0;
  std::string unit;

  friend bool operator==(const Metric&, const Metric&) = default;
};

struct TaskSummary {
  TaskId task_id;
  std::string outcome;
  std::vector<ArtifactEntry> artifact_index;
  std::string usage_notes;
  std::string data_formats;
  std::vector<Metric> metrics;

  friend bool operator==(const TaskSummary&, const TaskSummary&) = default;
};

enum class Severity { kMinor, kMajor };

namespace verdict {

struct Accept {
  TaskSummary final_summary;
  friend bool operator==(const Accept&, const Accept&) = default;
};
struct Revise {
  std::string feedback;
  Severity severity = Severity::kMinor;
  friend bool operator==(const Revise&, const Revise&) = default;
};
struct RedoFrom {
  TaskId target;
  std::string reason;
  friend bool operator==(const RedoFrom&, const RedoFrom&) = default;
};
struct Halt {
  std::string reason;
  friend bool operator==(const Halt&, const Halt&) = default;
};

}  // namespace verdict

using Verdict = std::variant<verdict::Accept, verdict::Revise, verdict::RedoFrom, verdict::Halt>;

std::string_view verdict_kind(const Verdict& v);

// Which judgement produced a verdict.
enum class VerdictScope { kTask, kProject, kPreflight };

std::string_view to_string(VerdictScope scope);

namespace event {

struct PlanProposed {
  Plan plan;
  std::optional<std::string> resume_instruction;
  friend bool operator==(const PlanProposed&, const PlanProposed&) = default;
};
struct PlanRejected {
  int version = 0;
  std::string comment;
  std::string actor;
  friend bool operator==(const PlanRejected&, const PlanRejected&) = default;
};
struct PlanApproved {
  int version = 0;
  std::string actor;
  friend bool operator==(const PlanApproved&, const PlanApproved&) = default;
};
struct TaskDispatched {
  TaskId task_id;
  int attempt = 0;
  friend bool operator==(const TaskDispatched&, const TaskDispatched&) = default;
};
struct StepExecuted {
  TaskId task_id;
  int attempt = 0;
  int step_no = 0;
  std::string digest;
  bool local_failure = false;
  friend bool operator==(const StepExecuted&, const StepExecuted&) = default;
};
struct ContextCompacted {
  TaskId task_id;
  int attempt = 0;
  int step_no = 0;          // compaction happened before this step's request
  int digested_steps = 0;
  friend bool operator==(const ContextCompacted&, const ContextCompacted&) = default;
};
struct AttemptFinished {
  TaskId task_id;
  int attempt = 0;
  std::string terminal;  // completed | budget_exhausted | tool_fatal
  std::string detail;
  friend bool operator==(const AttemptFinished&, const AttemptFinished&) = default;
};
struct AttemptAbandoned {
  TaskId task_id;
  int attempt = 0;
  std::string reason;
  friend bool operator==(const AttemptAbandoned&, const AttemptAbandoned&) = default;
};
struct VerdictIssued {
  TaskId task_id;
  int attempt = 0;
  Verdict verdict;
  VerdictScope scope = VerdictScope::kTask;
  bool escalated = false;  // Revise past the budget; project assessment follows
  friend bool operator==(const VerdictIssued&, const VerdictIssued&) = default;
};
struct TasksInvalidated {
  TaskIdSet tasks;
  TaskId cause;
  std::string reason;
  friend bool operator==(const TasksInvalidated&, const TasksInvalidated&) = default;
};
struct TasksRequeued {
  TaskIdSet tasks;
  friend bool operator==(const TasksRequeued&, const TasksRequeued&) = default;
};
struct ProjectHalted {
  std::string reason;
  TaskIdSet frontier;
  std::string issued_by;  // assessor | operator | engine
  friend bool operator==(const ProjectHalted&, const ProjectHalted&) = default;
};
struct ProjectResumed {
  std::string instruction;
  friend bool operator==(const ProjectResumed&, const ProjectResumed&) = default;
};
struct ProjectCompleted {
  friend bool operator==(const ProjectCompleted&, const ProjectCompleted&) = default;
};

}  // namespace event

using EventPayload =
    std::variant<event::PlanProposed, event::PlanRejected, event::PlanApproved,
                 event::TaskDispatched, event::StepExecuted, event::ContextCompacted,
                 event::AttemptFinished, event::AttemptAbandoned, event::VerdictIssued,
                 event::TasksInvalidated, event::TasksRequeued, event::ProjectHalted,
                 event::ProjectResumed, event::ProjectCompleted>;

std::string_view event_type(const EventPayload& payload);

struct Event {
  std::uint64_t sequence_no = 0;
  std::string timestamp;  // RFC 3339, UTC
  EventPayload payload;

  friend bool operator==(const Event&, const Event&) = default;
};

}  // namespace steward

template <>
struct std::hash<steward::TaskId> {
  std::size_t operator()(steward::TaskId id) const noexcept {
    return std::hash<int>{}(id.value);
  }
};
