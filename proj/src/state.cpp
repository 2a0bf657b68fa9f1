#include "steward/state.hpp"

#include <algorithm>

#include "steward/error.hpp"
#include "steward/plan_graph.hpp"

namespace steward {
namespace {

using Kind = TaskState::Kind;

[[noreturn]] void corrupt(const Event& e, const std::string& why) {
  throw Error(ErrorCode::kCorruptJournal, "event " + std::to_string(e.sequence_no) + " (" +
                                              std::string(event_type(e.payload)) + "): " + why);
}

TaskRecord& record(ProjectState& s, const Event& e, TaskId id) {
  auto it = s.tasks.find(id);
  if (it == s.tasks.end()) corrupt(e, "unknown task " + to_string(id));
  return it->second;
}

void expect_attempt(const Event& e, const TaskRecord& r, Kind kind, int attempt, TaskId id) {
  if (r.state.kind != kind || r.state.attempt != attempt) {
    corrupt(e, "task " + to_string(id) + " is " + describe(r.state) + ", expected " +
                   std::string(to_string(kind)) + "(" + std::to_string(attempt) + ")");
  }
}

struct Applier {
  ProjectState& s;
  const Event& e;

  void operator()(const event::PlanProposed& p) {
    if (p.plan.version <= s.latest_version) {
      corrupt(e, "plan version " + std::to_string(p.plan.version) + " is not newer than " +
                     std::to_string(s.latest_version));
    }
    s.latest_version = p.plan.version;
    s.proposed = p.plan;
    s.proposed_resume_instruction = p.resume_instruction;
  }

  void operator()(const event::PlanRejected& p) {
    if (!s.proposed || s.proposed->version != p.version) corrupt(e, "no such proposed version");
    s.proposed.reset();
    s.proposed_resume_instruction.reset();
  }

  void operator()(const event::PlanApproved& p) {
    if (!s.proposed || s.proposed->version != p.version) {
      corrupt(e, "version " + std::to_string(p.version) + " is not awaiting approval");
    }
    Plan next = std::move(*s.proposed);
    s.proposed.reset();
    s.proposed_resume_instruction.reset();

    std::map<TaskId, TaskRecord> tasks;
    for (const auto& spec : next.tasks) {
      TaskRecord rec;
      if (auto it = s.tasks.find(spec.task_id); it != s.tasks.end()) {
        rec = it->second;
        const TaskSpec* old = s.plan ? s.plan->find(spec.task_id) : nullptr;
        const bool keep = rec.state.is(Kind::kAccepted) && old != nullptr && *old == spec;
        if (!keep) {
          if (rec.state.in_flight()) corrupt(e, "plan changed under in-flight task");
          rec.state = TaskState::pending();
          rec.revisions = 0;
          rec.steps = 0;
        }
      }
      tasks.emplace(spec.task_id, std::move(rec));
    }
    s.tasks = std::move(tasks);
    s.plan = std::move(next);
    s.approved_version = p.version;
  }

  void operator()(const event::TaskDispatched& d) {
    if (!s.plan) corrupt(e, "dispatch before plan approval");
    if (s.halt) corrupt(e, "dispatch while halted");
    auto& r = record(s, e, d.task_id);
    if (!r.state.is(Kind::kPending)) {
      corrupt(e, "task " + to_string(d.task_id) + " is " + describe(r.state));
    }
    for (TaskId dep : s.plan->find(d.task_id)->dependencies) {
      if (!s.tasks.at(dep).state.is(Kind::kAccepted)) {
        corrupt(e, "dependency " + to_string(dep) + " of task " + to_string(d.task_id) +
                       " is not accepted");
      }
    }
    if (d.attempt != r.attempts + 1) corrupt(e, "attempt numbers must be dense");
    r.attempts = d.attempt;
    r.steps = 0;
    r.state = TaskState::running(d.attempt);
  }

  void operator()(const event::StepExecuted& st) {
    auto& r = record(s, e, st.task_id);
    expect_attempt(e, r, Kind::kRunning, st.attempt, st.task_id);
    if (st.step_no != r.steps + 1) corrupt(e, "step numbers must be dense");
    r.steps = st.step_no;
  }

  void operator()(const event::ContextCompacted& c) {
    auto& r = record(s, e, c.task_id);
    expect_attempt(e, r, Kind::kRunning, c.attempt, c.task_id);
  }

  void operator()(const event::AttemptFinished& f) {
    auto& r = record(s, e, f.task_id);
    expect_attempt(e, r, Kind::kRunning, f.attempt, f.task_id);
    r.state = TaskState::awaiting(f.attempt);
    r.last_terminal = f.terminal;
  }

  void operator()(const event::AttemptAbandoned& a) {
    auto& r = record(s, e, a.task_id);
    if (!r.state.in_flight() || r.state.attempt != a.attempt) {
      corrupt(e, "task " + to_string(a.task_id) + " attempt " + std::to_string(a.attempt) +
                     " is not in flight");
    }
    r.state = TaskState::pending();
  }

  void operator()(const event::VerdictIssued& v) {
    auto& r = record(s, e, v.task_id);
    if (v.scope == VerdictScope::kPreflight) {
      if (!r.state.is(Kind::kPending)) corrupt(e, "preflight verdict for a non-pending task");
      return;
    }
    expect_attempt(e, r, Kind::kAwaitingAssessment, v.attempt, v.task_id);
    if (v.scope == VerdictScope::kProject) {
      if (std::holds_alternative<verdict::Accept>(v.verdict)) {
        r.state = TaskState::failed();
        r.feedback.reset();
      }
      return;
    }
    if (std::holds_alternative<verdict::Accept>(v.verdict)) {
      r.state = TaskState::accepted();
      r.feedback.reset();
    } else if (const auto* rev = std::get_if<verdict::Revise>(&v.verdict)) {
      r.revisions += 1;
      r.feedback = rev->feedback;
      if (!v.escalated) r.state = TaskState::pending();
    }
    // RedoFrom and Halt leave the state for the events that follow.
  }

  void operator()(const event::TasksInvalidated& inv) {
    for (TaskId id : inv.tasks) {
      auto& r = record(s, e, id);
      r.state = TaskState::invalidated(inv.cause);
      r.revisions = 0;
      r.feedback = inv.reason;
    }
  }

  void operator()(const event::TasksRequeued& rq) {
    for (TaskId id : rq.tasks) {
      auto& r = record(s, e, id);
      if (!r.state.is(Kind::kInvalidated)) {
        corrupt(e, "task " + to_string(id) + " requeued without invalidation");
      }
      r.state = TaskState::pending();
    }
  }

  void operator()(const event::ProjectHalted& h) {
    if (s.halt) corrupt(e, "project already halted");
    s.halt = HaltRecord{h.reason, h.frontier, h.issued_by, e.timestamp};
    for (auto& [id, r] : s.tasks) {
      if (r.state.in_flight()) r.state = TaskState::halted();
    }
  }

  void operator()(const event::ProjectResumed&) {
    if (!s.halt) corrupt(e, "resume of a project that is not halted");
    s.halt.reset();
    for (auto& [id, r] : s.tasks) {
      if (r.state.is(Kind::kHaltedWithProject) || r.state.is(Kind::kFailed) ||
          r.state.is(Kind::kInvalidated)) {
        r.state = TaskState::pending();
        r.revisions = 0;
      }
    }
  }

  void operator()(const event::ProjectCompleted&) {
    if (!s.all_accepted()) corrupt(e, "completion with unaccepted tasks");
    s.completed = true;
  }
};

}  // namespace

TaskStates ProjectState::task_states() const {
  TaskStates out;
  for (const auto& [id, r] : tasks) out.emplace(id, r.state);
  return out;
}

int ProjectState::in_flight_count() const {
  return static_cast<int>(std::count_if(tasks.begin(), tasks.end(),
                                        [](const auto& kv) { return kv.second.state.in_flight(); }));
}

int ProjectState::running_count() const {
  return static_cast<int>(std::count_if(tasks.begin(), tasks.end(), [](const auto& kv) {
    return kv.second.state.is(TaskState::Kind::kRunning);
  }));
}

bool ProjectState::all_accepted() const {
  return plan.has_value() && !tasks.empty() &&
         std::all_of(tasks.begin(), tasks.end(), [](const auto& kv) {
           return kv.second.state.is(TaskState::Kind::kAccepted);
         });
}

void apply_event(ProjectState& state, const Event& event) {
  if (event.sequence_no != state.last_sequence_no + 1) {
    throw Error(ErrorCode::kCorruptJournal,
                "journal sequence gap or duplicate: expected " +
                    std::to_string(state.last_sequence_no + 1) + ", found " +
                    std::to_string(event.sequence_no));
  }
  if (state.completed) {
    throw Error(ErrorCode::kCorruptJournal,
                "event " + std::to_string(event.sequence_no) + " after ProjectCompleted");
  }
  std::visit(Applier{state, event}, event.payload);
  state.last_sequence_no = event.sequence_no;
}

ProjectState fold_state(std::span<const Event> events) {
  ProjectState state;
  for (const auto& e : events) apply_event(state, e);
  return state;
}

}  // namespace steward
