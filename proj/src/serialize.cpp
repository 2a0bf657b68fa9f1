#include "steward/serialize.hpp"

#include "steward/error.hpp"

namespace steward {
namespace {

template <typename T>
T value_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return it->get<T>();
}

json task_set(const TaskIdSet& s) {
  json arr = json::array();
  for (auto id : s) arr.push_back(id.value);
  return arr;
}

TaskIdSet task_set_from(const json& j) {
  TaskIdSet out;
  for (const auto& v : j) out.insert(TaskId(v.get<int>()));
  return out;
}

std::int64_t ms(std::chrono::milliseconds d) { return d.count(); }

}  // namespace

void to_json(json& j, TaskId id) { j = id.value; }
void from_json(const json& j, TaskId& id) { id = TaskId(j.get<int>()); }

void to_json(json& j, const RunConfig& c) {
  j = json{{"concurrency_limit", c.concurrency_limit},
           {"step_budget", c.step_budget},
           {"revise_budget", c.revise_budget},
           {"assess_reprompt_limit", c.assess_reprompt_limit},
           {"tool_timeout_ms", ms(c.tool_timeout)},
           {"max_tool_timeout_ms", ms(c.max_tool_timeout)},
           {"output_truncation", c.output_truncation},
           {"context_budget", c.context_budget},
           {"keep_recent_steps", c.keep_recent_steps},
           {"summary_cap", c.summary_cap},
           {"evidence_cap", c.evidence_cap},
           {"halt_drain_ms", ms(c.halt_drain)},
           {"job_poll_interval_ms", ms(c.job_poll_interval)},
           {"unattended_wait_ms", ms(c.unattended_wait)},
           {"env_allowlist", c.env_allowlist},
           {"sync_journal", c.sync_journal}};
  // api_token is deliberately never serialized.
}

void from_json(const json& j, RunConfig& c) {
  RunConfig d;
  c.concurrency_limit = value_or(j, "concurrency_limit", d.concurrency_limit);
  c.step_budget = value_or(j, "step_budget", d.step_budget);
  c.revise_budget = value_or(j, "revise_budget", d.revise_budget);
  c.assess_reprompt_limit = value_or(j, "assess_reprompt_limit", d.assess_reprompt_limit);
  c.tool_timeout = std::chrono::milliseconds(value_or(j, "tool_timeout_ms", ms(d.tool_timeout)));
  c.max_tool_timeout =
      std::chrono::milliseconds(value_or(j, "max_tool_timeout_ms", ms(d.max_tool_timeout)));
  c.output_truncation = value_or(j, "output_truncation", d.output_truncation);
  c.context_budget = value_or(j, "context_budget", d.context_budget);
  c.keep_recent_steps = value_or(j, "keep_recent_steps", d.keep_recent_steps);
  c.summary_cap = value_or(j, "summary_cap", d.summary_cap);
  c.evidence_cap = value_or(j, "evidence_cap", d.evidence_cap);
  c.halt_drain = std::chrono::milliseconds(value_or(j, "halt_drain_ms", ms(d.halt_drain)));
  c.job_poll_interval =
      std::chrono::milliseconds(value_or(j, "job_poll_interval_ms", ms(d.job_poll_interval)));
  c.unattended_wait =
      std::chrono::milliseconds(value_or(j, "unattended_wait_ms", ms(d.unattended_wait)));
  c.env_allowlist = value_or(j, "env_allowlist", d.env_allowlist);
  c.sync_journal = value_or(j, "sync_journal", d.sync_journal);
  c.api_token = value_or(j, "api_token", std::string{});
}

void to_json(json& j, const Attachment& a) {
  j = json{{"path", a.path}, {"byte_length", a.byte_length}};
}
void from_json(const json& j, Attachment& a) {
  a.path = j.at("path").get<std::string>();
  a.byte_length = value_or<std::uint64_t>(j, "byte_length", 0);
}

void to_json(json& j, const ProjectSpec& s) {
  j = json{{"project_id", s.project_id},
           {"instruction", s.instruction},
           {"attachments", s.attachments},
           {"config", s.config}};
}
void from_json(const json& j, ProjectSpec& s) {
  s.project_id = j.at("project_id").get<std::string>();
  s.instruction = j.at("instruction").get<std::string>();
  s.attachments = value_or(j, "attachments", std::vector<Attachment>{});
  s.config = value_or(j, "config", RunConfig{});
}

void to_json(json& j, const TaskSpec& t) {
  j = json{{"task_id", t.task_id.value},
           {"title", t.title},
           {"objective", t.objective},
           {"success_criteria", t.success_criteria},
           {"dependencies", task_set(t.dependencies)},
           {"expected_artifacts", t.expected_artifacts},
           {"hints", t.hints ? json(*t.hints) : json(nullptr)},
           {"expensive", t.expensive}};
}
void from_json(const json& j, TaskSpec& t) {
  t.task_id = TaskId(j.at("task_id").get<int>());
  t.title = value_or(j, "title", std::string{});
  t.objective = value_or(j, "objective", std::string{});
  t.success_criteria = value_or(j, "success_criteria", std::vector<std::string>{});
  t.dependencies = j.contains("dependencies") && !j["dependencies"].is_null()
                       ? task_set_from(j["dependencies"])
                       : TaskIdSet{};
  t.expected_artifacts = value_or(j, "expected_artifacts", std::vector<std::string>{});
  if (j.contains("hints") && !j["hints"].is_null()) {
    t.hints = j["hints"].get<std::string>();
  } else {
    t.hints.reset();
  }
  t.expensive = value_or(j, "expensive", false);
}

void to_json(json& j, const Plan& p) {
  j = json{{"goal", p.goal}, {"tasks", p.tasks}, {"version", p.version}};
}
void from_json(const json& j, Plan& p) {
  p.goal = value_or(j, "goal", std::string{});
  p.tasks = j.at("tasks").get<std::vector<TaskSpec>>();
  p.version = value_or(j, "version", 1);
}

void to_json(json& j, const TaskState& s) {
  j = json{{"kind", to_string(s.kind)}};
  if (s.in_flight()) j["attempt"] = s.attempt;
  if (s.cause) j["cause"] = s.cause->value;
}

void to_json(json& j, const ArtifactEntry& a) {
  j = json{{"path", a.path}, {"description", a.description}};
}
void from_json(const json& j, ArtifactEntry& a) {
  a.path = j.at("path").get<std::string>();
  a.description = value_or(j, "description", std::string{});
}

void to_json(json& j, const Metric& m) {
  j = json{{"name", m.name}, {"value", m.value}, {"unit", m.unit}};
}
void from_json(const json& j, Metric& m) {
  m.name = j.at("name").get<std::string>();
  m.value = j.at("value").get<double>();
  m.unit = value_or(j, "unit", std::string{});
}

void to_json(json& j, const TaskSummary& s) {
  j = json{{"task_id", s.task_id.value},
           {"outcome", s.outcome},
           {"artifact_index", s.artifact_index},
           {"usage_notes", s.usage_notes},
           {"data_formats", s.data_formats},
           {"metrics", s.metrics}};
}
void from_json(const json& j, TaskSummary& s) {
  s.task_id = TaskId(value_or(j, "task_id", 0));
  s.outcome = value_or(j, "outcome", std::string{});
  s.artifact_index = value_or(j, "artifact_index", std::vector<ArtifactEntry>{});
  s.usage_notes = value_or(j, "usage_notes", std::string{});
  s.data_formats = value_or(j, "data_formats", std::string{});
  s.metrics = value_or(j, "metrics", std::vector<Metric>{});
}

std::string_view to_string(Severity s) { return s == Severity::kMajor ? "major" : "minor"; }

Severity severity_from_string(std::string_view s) {
  if (s == "minor") return Severity::kMinor;
  if (s == "major") return Severity::kMajor;
  throw Error(ErrorCode::kSchema, "unknown severity: " + std::string(s));
}

void to_json(json& j, const Verdict& v) {
  j = json{{"kind", verdict_kind(v)}};
  if (const auto* a = std::get_if<verdict::Accept>(&v)) {
    j["final_summary"] = a->final_summary;
  } else if (const auto* r = std::get_if<verdict::Revise>(&v)) {
    j["feedback"] = r->feedback;
    j["severity"] = to_string(r->severity);
  } else if (const auto* rf = std::get_if<verdict::RedoFrom>(&v)) {
    j["target"] = rf->target.value;
    j["reason"] = rf->reason;
  } else if (const auto* h = std::get_if<verdict::Halt>(&v)) {
    j["reason"] = h->reason;
  }
}

void from_json(const json& j, Verdict& v) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "accept") {
    v = verdict::Accept{j.at("final_summary").get<TaskSummary>()};
  } else if (kind == "revise") {
    v = verdict::Revise{j.at("feedback").get<std::string>(),
                        severity_from_string(value_or(j, "severity", std::string("minor")))};
  } else if (kind == "redo_from") {
    v = verdict::RedoFrom{TaskId(j.at("target").get<int>()), value_or(j, "reason", std::string{})};
  } else if (kind == "halt") {
    v = verdict::Halt{j.at("reason").get<std::string>()};
  } else {
    throw Error(ErrorCode::kSchema, "unknown verdict kind: " + kind);
  }
}

namespace {

VerdictScope scope_from_string(const std::string& s) {
  if (s == "task") return VerdictScope::kTask;
  if (s == "project") return VerdictScope::kProject;
  if (s == "preflight") return VerdictScope::kPreflight;
  throw Error(ErrorCode::kSchema, "unknown verdict scope: " + s);
}

json body_of(const EventPayload& payload) {
  using namespace event;
  return std::visit(
      [](const auto& e) -> json {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, PlanProposed>) {
          return json{{"plan", e.plan},
                      {"resume_instruction",
                       e.resume_instruction ? json(*e.resume_instruction) : json(nullptr)}};
        } else if constexpr (std::is_same_v<T, PlanRejected>) {
          return json{{"version", e.version}, {"comment", e.comment}, {"actor", e.actor}};
        } else if constexpr (std::is_same_v<T, PlanApproved>) {
          return json{{"version", e.version}, {"actor", e.actor}};
        } else if constexpr (std::is_same_v<T, TaskDispatched>) {
          return json{{"task_id", e.task_id.value}, {"attempt", e.attempt}};
        } else if constexpr (std::is_same_v<T, StepExecuted>) {
          return json{{"task_id", e.task_id.value},
                      {"attempt", e.attempt},
                      {"step_no", e.step_no},
                      {"digest", e.digest},
                      {"local_failure", e.local_failure}};
        } else if constexpr (std::is_same_v<T, ContextCompacted>) {
          return json{{"task_id", e.task_id.value},
                      {"attempt", e.attempt},
                      {"step_no", e.step_no},
                      {"digested_steps", e.digested_steps}};
        } else if constexpr (std::is_same_v<T, AttemptFinished>) {
          return json{{"task_id", e.task_id.value},
                      {"attempt", e.attempt},
                      {"terminal", e.terminal},
                      {"detail", e.detail}};
        } else if constexpr (std::is_same_v<T, AttemptAbandoned>) {
          return json{{"task_id", e.task_id.value}, {"attempt", e.attempt}, {"reason", e.reason}};
        } else if constexpr (std::is_same_v<T, VerdictIssued>) {
          return json{{"task_id", e.task_id.value},
                      {"attempt", e.attempt},
                      {"verdict", e.verdict},
                      {"scope", to_string(e.scope)},
                      {"escalated", e.escalated}};
        } else if constexpr (std::is_same_v<T, TasksInvalidated>) {
          return json{{"tasks", task_set(e.tasks)}, {"cause", e.cause.value}, {"reason", e.reason}};
        } else if constexpr (std::is_same_v<T, TasksRequeued>) {
          return json{{"tasks", task_set(e.tasks)}};
        } else if constexpr (std::is_same_v<T, ProjectHalted>) {
          return json{{"reason", e.reason},
                      {"frontier", task_set(e.frontier)},
                      {"issued_by", e.issued_by}};
        } else if constexpr (std::is_same_v<T, ProjectResumed>) {
          return json{{"instruction", e.instruction}};
        } else {
          return json::object();
        }
      },
      payload);
}

EventPayload payload_from(const std::string& type, const json& b) {
  using namespace event;
  if (type == "PlanProposed") {
    PlanProposed e{b.at("plan").get<Plan>(), std::nullopt};
    if (b.contains("resume_instruction") && !b["resume_instruction"].is_null()) {
      e.resume_instruction = b["resume_instruction"].get<std::string>();
    }
    return e;
  }
  if (type == "PlanRejected") {
    return PlanRejected{b.at("version").get<int>(), value_or(b, "comment", std::string{}),
                        value_or(b, "actor", std::string{})};
  }
  if (type == "PlanApproved") {
    return PlanApproved{b.at("version").get<int>(), value_or(b, "actor", std::string{})};
  }
  if (type == "TaskDispatched") {
    return TaskDispatched{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>()};
  }
  if (type == "StepExecuted") {
    return StepExecuted{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>(),
                        b.at("step_no").get<int>(), b.at("digest").get<std::string>(),
                        value_or(b, "local_failure", false)};
  }
  if (type == "ContextCompacted") {
    return ContextCompacted{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>(),
                            b.at("step_no").get<int>(), b.at("digested_steps").get<int>()};
  }
  if (type == "AttemptFinished") {
    return AttemptFinished{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>(),
                           b.at("terminal").get<std::string>(),
                           value_or(b, "detail", std::string{})};
  }
  if (type == "AttemptAbandoned") {
    return AttemptAbandoned{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>(),
                            value_or(b, "reason", std::string{})};
  }
  if (type == "VerdictIssued") {
    return VerdictIssued{TaskId(b.at("task_id").get<int>()), b.at("attempt").get<int>(),
                         b.at("verdict").get<Verdict>(),
                         scope_from_string(value_or(b, "scope", std::string("task"))),
                         value_or(b, "escalated", false)};
  }
  if (type == "TasksInvalidated") {
    return TasksInvalidated{task_set_from(b.at("tasks")), TaskId(b.at("cause").get<int>()),
                            value_or(b, "reason", std::string{})};
  }
  if (type == "TasksRequeued") return TasksRequeued{task_set_from(b.at("tasks"))};
  if (type == "ProjectHalted") {
    return ProjectHalted{b.at("reason").get<std::string>(),
                         b.contains("frontier") ? task_set_from(b["frontier"]) : TaskIdSet{},
                         value_or(b, "issued_by", std::string("assessor"))};
  }
  if (type == "ProjectResumed") {
    return ProjectResumed{value_or(b, "instruction", std::string{})};
  }
  if (type == "ProjectCompleted") return ProjectCompleted{};
  throw Error(ErrorCode::kCorruptJournal, "unknown event type: " + type);
}

}  // namespace

void to_json(json& j, const Event& e) {
  j = json{{"seq", e.sequence_no},
           {"ts", e.timestamp},
           {"type", event_type(e.payload)},
           {"body", body_of(e.payload)}};
}

void from_json(const json& j, Event& e) {
  e.sequence_no = j.at("seq").get<std::uint64_t>();
  e.timestamp = value_or(j, "ts", std::string{});
  e.payload = payload_from(j.at("type").get<std::string>(), j.at("body"));
}

void to_json(json& j, const HaltRecord& h) {
  j = json{{"reason", h.reason},
           {"frontier", task_set(h.frontier)},
           {"issued_by", h.issued_by},
           {"timestamp", h.timestamp}};
}

void to_json(json& j, const TaskRecord& r) {
  j = json{{"state", r.state},
           {"attempts", r.attempts},
           {"revisions", r.revisions},
           {"steps", r.steps},
           {"feedback", r.feedback ? json(*r.feedback) : json(nullptr)},
           {"last_terminal", r.last_terminal ? json(*r.last_terminal) : json(nullptr)}};
}

void to_json(json& j, const ProjectState& s) {
  json tasks = json::array();
  for (const auto& [id, rec] : s.tasks) {
    json t = rec;
    t["task_id"] = id.value;
    tasks.push_back(std::move(t));
  }
  j = json{{"last_sequence_no", s.last_sequence_no},
           {"latest_version", s.latest_version},
           {"approved_version", s.approved_version},
           {"plan", s.plan ? json(*s.plan) : json(nullptr)},
           {"proposed", s.proposed ? json(*s.proposed) : json(nullptr)},
           {"proposed_resume_instruction",
            s.proposed_resume_instruction ? json(*s.proposed_resume_instruction) : json(nullptr)},
           {"tasks", tasks},
           {"halt", s.halt ? json(*s.halt) : json(nullptr)},
           {"completed", s.completed}};
}

json parse_json(std::string_view text, std::string_view what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string(what) + ": " + e.what());
  }
}

std::string serialize_event(const Event& e) { return json(e).dump(); }

Event parse_event(std::string_view line) {
  try {
    return json::parse(line).get<Event>();
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::kCorruptJournal, std::string("unparseable event: ") + ex.what());
  } catch (const Error& ex) {
    throw Error(ErrorCode::kCorruptJournal, std::string("unparseable event: ") + ex.what());
  }
}

std::string canonical_without_timestamp(const Event& e) {
  json j = e;
  j.erase("ts");
  return j.dump();
}

}  // namespace steward
