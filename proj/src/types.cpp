#include "steward/types.hpp"

#include <filesystem>

#include "steward/error.hpp"

namespace steward {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kPermissionDenied: return "permission-denied";
    case ErrorCode::kPathEscape: return "path-escape";
    case ErrorCode::kAlreadyExists: return "already-exists";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kFailedPrecondition: return "failed-precondition";
    case ErrorCode::kCorruptJournal: return "corrupt-journal";
    case ErrorCode::kIntegrity: return "integrity";
    case ErrorCode::kScriptExhausted: return "script-exhausted";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kSpawn: return "spawn";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kPlanningFailed: return "planning-failed";
    case ErrorCode::kCancelled: return "cancelled";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

std::string to_string(TaskId id) { return std::to_string(id.value); }

std::vector<std::string> validate_config(const RunConfig& c) {
  std::vector<std::string> out;
  if (c.concurrency_limit < 1) out.push_back("concurrency_limit must be >= 1");
  if (c.step_budget < 1) out.push_back("step_budget must be >= 1");
  if (c.revise_budget < 0) out.push_back("revise_budget must be >= 0");
  if (c.assess_reprompt_limit < 1) out.push_back("assess_reprompt_limit must be >= 1");
  if (c.tool_timeout.count() <= 0) out.push_back("tool_timeout must be positive");
  if (c.max_tool_timeout.count() <= 0) out.push_back("max_tool_timeout must be positive");
  if (c.tool_timeout > c.max_tool_timeout) out.push_back("tool_timeout exceeds max_tool_timeout");
  if (c.halt_drain.count() < 0) out.push_back("halt_drain must not be negative");
  if (c.job_poll_interval.count() <= 0) out.push_back("job_poll_interval must be positive");
  if (c.output_truncation == 0) out.push_back("output_truncation must be positive");
  if (c.keep_recent_steps < 0) out.push_back("keep_recent_steps must not be negative");
  return out;
}

namespace {

bool is_clean_relative(const std::string& p) {
  if (p.empty()) return false;
  std::filesystem::path path(p);
  if (path.is_absolute() || p.front() == '/') return false;
  for (const auto& part : path) {
    if (part == "..") return false;
  }
  return true;
}

}  // namespace

std::vector<std::string> validate_project_spec(const ProjectSpec& spec) {
  std::vector<std::string> out;
  if (spec.project_id.empty()) out.push_back("project_id must not be empty");
  if (spec.instruction.empty()) out.push_back("instruction must not be empty");
  for (const auto& a : spec.attachments) {
    if (!is_clean_relative(a.path)) {
      out.push_back("attachment path must be relative without '..': " + a.path);
    }
  }
  for (auto& msg : validate_config(spec.config)) out.push_back(std::move(msg));
  return out;
}

const TaskSpec* Plan::find(TaskId id) const {
  for (const auto& t : tasks) {
    if (t.task_id == id) return &t;
  }
  return nullptr;
}

TaskIdSet Plan::task_ids() const {
  TaskIdSet ids;
  for (const auto& t : tasks) ids.insert(t.task_id);
  return ids;
}

std::string_view to_string(TaskState::Kind kind) {
  switch (kind) {
    case TaskState::Kind::kPending: return "Pending";
    case TaskState::Kind::kReady: return "Ready";
    case TaskState::Kind::kRunning: return "Running";
    case TaskState::Kind::kAwaitingAssessment: return "AwaitingAssessment";
    case TaskState::Kind::kAccepted: return "Accepted";
    case TaskState::Kind::kInvalidated: return "Invalidated";
    case TaskState::Kind::kFailed: return "Failed";
    case TaskState::Kind::kHaltedWithProject: return "HaltedWithProject";
  }
  return "?";
}

std::string describe(const TaskState& s) {
  std::string out(to_string(s.kind));
  if (s.in_flight()) out += "(" + std::to_string(s.attempt) + ")";
  if (s.cause) out += "(" + to_string(*s.cause) + ")";
  return out;
}

std::string_view verdict_kind(const Verdict& v) {
  struct {
    std::string_view operator()(const verdict::Accept&) const { return "accept"; }
    std::string_view operator()(const verdict::Revise&) const { return "revise"; }
    std::string_view operator()(const verdict::RedoFrom&) const { return "redo_from"; }
    std::string_view operator()(const verdict::Halt&) const { return "halt"; }
  } visitor;
  return std::visit(visitor, v);
}

std::string_view to_string(VerdictScope scope) {
  switch (scope) {
    case VerdictScope::kTask: return "task";
    case VerdictScope::kProject: return "project";
    case VerdictScope::kPreflight: return "preflight";
  }
  return "task";
}

std::string_view event_type(const EventPayload& payload) {
  static constexpr std::string_view kNames[] = {
      "PlanProposed",     "PlanRejected",     "PlanApproved",   "TaskDispatched",
      "StepExecuted",     "ContextCompacted", "AttemptFinished", "AttemptAbandoned",
      "VerdictIssued",    "TasksInvalidated", "TasksRequeued",  "ProjectHalted",
      "ProjectResumed",   "ProjectCompleted"};
  static_assert(std::size(kNames) == std::variant_size_v<EventPayload>);
  return kNames[payload.index()];
}

}  // namespace steward
