#include "steward/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <future>
#include <regex>
#include <thread>

#include "steward/assessor.hpp"
#include "steward/error.hpp"
#include "steward/plan_graph.hpp"
#include "steward/serialize.hpp"

namespace steward {

namespace fs = std::filesystem;
using Kind = TaskState::Kind;
using SteadyClock = std::chrono::steady_clock;

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kCompleted: return "Completed";
    case RunStatus::kHalted: return "Halted";
    case RunStatus::kFatal: return "Fatal";
  }
  return "Fatal";
}

fs::path halt_request_path(const Workspace& workspace) {
  return workspace.layout().journal / "halt.request";
}

void write_halt_request(const Workspace& workspace, const std::string& reason) {
  write_file_atomic(halt_request_path(workspace), json{{"reason", reason}}.dump() + "\n", nullptr,
                    true);
}

namespace {

std::optional<std::string> take_halt_request(const Workspace& ws) {
  const fs::path p = halt_request_path(ws);
  std::error_code ec;
  if (!fs::exists(p, ec)) return std::nullopt;
  std::string reason = "halt requested by operator";
  try {
    json j = json::parse(read_file_bytes(p));
    if (j.contains("reason") && j.at("reason").is_string() && !j.at("reason").get<std::string>().empty()) {
      reason = j.at("reason").get<std::string>();
    }
  } catch (const std::exception&) {
  }
  return reason;
}

void clear_halt_request(const Workspace& ws) {
  std::error_code ec;
  fs::remove(halt_request_path(ws), ec);
}

std::vector<std::string> shared_paths_in(const std::string& text) {
  static const std::regex re(R"(shared/[A-Za-z0-9._\-/]+)");
  std::vector<std::string> out;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator();
       ++it) {
    std::string p = it->str();
    while (!p.empty() && (p.back() == '.' || p.back() == '/')) p.pop_back();
    if (p.size() > 7 && std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  }
  return out;
}

std::string join_ids(const TaskIdSet& ids) {
  std::string out;
  for (TaskId id : ids) out += (out.empty() ? "" : ", ") + to_string(id);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

struct Orchestrator::Attempt {
  TaskId task;
  int attempt = 0;
  std::string owner;
  std::atomic<bool> cancelled{false};
  std::thread thread;
};

struct Orchestrator::Message {
  enum class Type { kStep, kCompaction, kFinished, kVerdict, kFailure, kExit, kWake };
  Type type = Type::kWake;
  std::shared_ptr<Attempt> attempt;
  StepRecord step;
  int before_step = 0;
  int digested = 0;
  TaskResult result;
  std::optional<AssessmentResult> assessment;
  std::exception_ptr error;
  std::promise<bool>* ack = nullptr;
};

class Orchestrator::Scheduler {
 public:
  explicit Scheduler(Orchestrator& o) : o_(o) {
    std::lock_guard lock(o_.halt_mu_);
    o_.active_ = this;
  }

  ~Scheduler() {
    {
      std::lock_guard lock(o_.halt_mu_);
      o_.active_ = nullptr;
    }
    try {
      abort_all();
    } catch (...) {
    }
  }

  RunOutcome run();

  void post(Message m) {
    {
      std::lock_guard lock(qmu_);
      queue_.push_back(std::move(m));
    }
    qcv_.notify_all();
  }

  void wake() { post(Message{}); }

  // Posts and blocks until the scheduler answers.
  bool call(Message m) {
    std::promise<bool> done;
    auto fut = done.get_future();
    m.ack = &done;
    post(std::move(m));
    return fut.get();
  }

 private:
  class Observer;

  ProjectState snapshot() const { return o_.state(); }
  Event record(EventPayload p) { return o_.record(std::move(p)); }

  bool stale(const Message& m) const;
  void process(Message& m);
  // Handles queued messages, waiting up to `wait` for the first one. With
  // stale_only, messages from live attempts stay queued.
  void pump(std::chrono::milliseconds wait, bool stale_only = false);
  void wait_for_exit(const std::vector<std::string>& owners);

  void recover();
  void dispatch();
  void start_attempt(const TaskSpec& spec, int attempt, std::optional<std::string> feedback);
  void attempt_main(std::shared_ptr<Attempt> at, TaskBrief brief);

  void on_verdict(TaskId id, int attempt, Verdict verdict);
  void escalate(TaskId id, int attempt);
  void redo(TaskId target, const std::string& reason, std::optional<TaskId> trigger);
  void finish_invalidation(const TaskIdSet& tasks, TaskId cause, const std::string& reason,
                           std::uint64_t tag);
  void halt(const std::string& reason, const std::string& issued_by, TaskIdSet frontier);
  void drain();
  void abort_all();
  void check_halt_requests();

  std::vector<TaskSummary> accepted_summaries() const;
  std::vector<std::string> revise_history(TaskId id) const;

  Orchestrator& o_;
  std::shared_ptr<const Plan> plan_;

  std::mutex qmu_;
  std::condition_variable qcv_;
  std::deque<Message> queue_;

  std::map<std::string, std::shared_ptr<Attempt>> live_;  // by owner
  std::set<std::string> owners_;                          // every owner of this run
  std::optional<std::string> fatal_;
};

class Orchestrator::Scheduler::Observer final : public WorkerObserver {
 public:
  Observer(Scheduler& s, std::shared_ptr<Attempt> at) : s_(s), at_(std::move(at)) {}

  void on_step(const TaskResult&, const StepRecord& step, const std::vector<ChatMessage>&) override {
    Message m;
    m.type = Message::Type::kStep;
    m.attempt = at_;
    m.step = step;
    if (!s_.call(std::move(m))) at_->cancelled = true;
  }

  void on_compaction(int before_step, int digested) override {
    Message m;
    m.type = Message::Type::kCompaction;
    m.attempt = at_;
    m.before_step = before_step;
    m.digested = digested;
    if (!s_.call(std::move(m))) at_->cancelled = true;
  }

  bool cancelled() const override { return at_->cancelled.load(); }

 private:
  Scheduler& s_;
  std::shared_ptr<Attempt> at_;
};

bool Orchestrator::Scheduler::stale(const Message& m) const {
  if (!m.attempt || m.attempt->cancelled) return true;
  std::lock_guard lock(o_.mu_);
  auto it = o_.state_.tasks.find(m.attempt->task);
  if (it == o_.state_.tasks.end()) return true;
  const TaskState& st = it->second.state;
  return !st.in_flight() || st.attempt != m.attempt->attempt || o_.state_.halt.has_value();
}

void Orchestrator::Scheduler::process(Message& m) {
  using T = Message::Type;
  auto answer = [&](bool v) {
    if (m.ack) {
      m.ack->set_value(v);
      m.ack = nullptr;
    }
  };
  try {
    switch (m.type) {
      case T::kWake:
        break;
      case T::kStep:
        if (stale(m)) {
          answer(false);
          break;
        }
        record(event::StepExecuted{m.attempt->task, m.attempt->attempt, m.step.step_no,
                                   m.step.digest, m.step.local_failure});
        answer(true);
        break;
      case T::kCompaction:
        if (stale(m)) {
          answer(false);
          break;
        }
        record(event::ContextCompacted{m.attempt->task, m.attempt->attempt, m.before_step,
                                       m.digested});
        answer(true);
        break;
      case T::kFinished:
        if (stale(m) || m.result.terminal == Terminal::kCancelled) {
          answer(false);
          break;
        }
        record(event::AttemptFinished{m.attempt->task, m.attempt->attempt,
                                      std::string(to_string(m.result.terminal)), m.result.detail});
        // Jobs never outlive their attempt.
        o_.executor_->cancel_owner(m.attempt->owner);
        answer(true);
        break;
      case T::kVerdict:
        if (!stale(m)) on_verdict(m.attempt->task, m.attempt->attempt, m.assessment->verdict);
        break;
      case T::kFailure:
        try {
          std::rethrow_exception(m.error);
        } catch (const SimulatedCrash&) {
          throw;
        } catch (const std::exception& e) {
          if (!stale(m) && !fatal_) {
            fatal_ = "task " + to_string(m.attempt->task) + " attempt " +
                     std::to_string(m.attempt->attempt) + ": " + e.what();
          }
        }
        break;
      case T::kExit: {
        auto it = live_.find(m.attempt->owner);
        if (it != live_.end()) {
          if (it->second->thread.joinable()) it->second->thread.join();
          live_.erase(it);
        }
        break;
      }
    }
  } catch (...) {
    answer(false);
    throw;
  }
}

void Orchestrator::Scheduler::pump(std::chrono::milliseconds wait, bool stale_only) {
  {
    std::unique_lock lock(qmu_);
    if (queue_.empty()) qcv_.wait_for(lock, wait, [&] { return !queue_.empty(); });
  }
  // One message at a time, so that nested pumps (a halt issued while a
  // verdict is processed) still see everything that is queued.
  std::deque<Message> deferred;
  auto requeue = [&] {
    std::lock_guard lock(qmu_);
    for (auto it = deferred.rbegin(); it != deferred.rend(); ++it) queue_.push_front(std::move(*it));
    deferred.clear();
  };
  while (true) {
    Message m;
    {
      std::lock_guard lock(qmu_);
      if (queue_.empty()) break;
      m = std::move(queue_.front());
      queue_.pop_front();
    }
    if (stale_only && m.attempt && !m.attempt->cancelled && m.type != Message::Type::kExit) {
      deferred.push_back(std::move(m));
      continue;
    }
    try {
      process(m);
    } catch (...) {
      requeue();
      throw;
    }
  }
  requeue();
}

void Orchestrator::Scheduler::wait_for_exit(const std::vector<std::string>& owners) {
  auto any_live = [&] {
    return std::any_of(owners.begin(), owners.end(),
                       [&](const std::string& o) { return live_.count(o) != 0; });
  };
  while (any_live()) pump(std::chrono::milliseconds(50), true);
}

std::vector<TaskSummary> Orchestrator::Scheduler::accepted_summaries() const {
  std::vector<TaskSummary> out;
  const ProjectState s = snapshot();
  for (const auto& [id, rec] : s.tasks) {
    if (!rec.state.is(Kind::kAccepted)) continue;
    if (auto sum = o_.workspace_.read_summary(id)) out.push_back(std::move(*sum));
  }
  return out;
}

std::vector<std::string> Orchestrator::Scheduler::revise_history(TaskId id) const {
  std::vector<std::string> out;
  std::lock_guard lock(o_.mu_);
  for (const auto& e : o_.events_) {
    if (const auto* v = std::get_if<event::VerdictIssued>(&e.payload)) {
      if (v->task_id != id || v->scope != VerdictScope::kTask) continue;
      if (const auto* r = std::get_if<verdict::Revise>(&v->verdict)) out.push_back(r->feedback);
    } else if (const auto* inv = std::get_if<event::TasksInvalidated>(&e.payload)) {
      if (inv->tasks.count(id)) out.clear();
    } else if (std::holds_alternative<event::ProjectResumed>(e.payload) ||
               std::holds_alternative<event::PlanApproved>(e.payload)) {
      out.clear();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recovery

void Orchestrator::Scheduler::recover() {
  Workspace& ws = o_.workspace_;
  ProjectState s = snapshot();

  // A summary without its Accept was written just before a crash.
  for (const auto& [id, rec] : s.tasks) {
    if (rec.state.is(Kind::kAccepted)) continue;
    std::error_code ec;
    if (fs::exists(ws.summary_path(id), ec)) ws.archive_summary(id, rec.attempts);
  }

  // Invalidations whose requeue was never journaled.
  std::map<std::uint64_t, TaskIdSet> pending;
  {
    std::lock_guard lock(o_.mu_);
    std::map<TaskId, std::uint64_t> latest;
    for (const auto& e : o_.events_) {
      if (const auto* inv = std::get_if<event::TasksInvalidated>(&e.payload)) {
        for (TaskId id : inv->tasks) latest[id] = e.sequence_no;
      }
    }
    for (const auto& [id, rec] : s.tasks) {
      if (rec.state.is(Kind::kInvalidated)) pending[latest.at(id)].insert(id);
    }
  }
  for (const auto& [seq, tasks] : pending) {
    event::TasksInvalidated inv;
    {
      std::lock_guard lock(o_.mu_);
      inv = std::get<event::TasksInvalidated>(o_.events_.at(seq - 1).payload);
    }
    if (s.halt) continue;  // ProjectResumed requeues them
    finish_invalidation(tasks, inv.cause, inv.reason, seq);
  }

  s = snapshot();
  if (s.halt) return;
  for (const auto& [id, rec] : s.tasks) {
    if (!rec.state.in_flight()) continue;
    record(event::AttemptAbandoned{id, rec.state.attempt, "engine restarted"});
    ws.archive_attempt(id, rec.state.attempt);
  }
}

// ---------------------------------------------------------------------------
// Dispatch

void Orchestrator::Scheduler::dispatch() {
  const ProjectState s = snapshot();
  if (s.halt || s.completed) return;
  int in_flight = s.in_flight_count();
  for (TaskId id : ready_set(*plan_, s.task_states())) {
    if (in_flight >= o_.config_.concurrency_limit) break;
    const TaskSpec& spec = *plan_->find(id);
    const TaskRecord& rec = s.tasks.at(id);
    std::optional<std::string> feedback = rec.feedback;

    if (spec.expensive && !rec.feedback) {
      AssessmentResult pre = assess_preflight(*plan_, spec, accepted_summaries(),
                                              *o_.backends_.assessor, o_.config_);
      record(event::VerdictIssued{id, rec.attempts, pre.verdict, VerdictScope::kPreflight, false});
      if (const auto* r = std::get_if<verdict::Revise>(&pre.verdict)) {
        feedback = r->feedback;
      } else if (const auto* rf = std::get_if<verdict::RedoFrom>(&pre.verdict)) {
        redo(rf->target, rf->reason, std::nullopt);
        return;
      } else if (const auto* h = std::get_if<verdict::Halt>(&pre.verdict)) {
        halt(h->reason, "assessor", {id});
        return;
      }
    }
    start_attempt(spec, rec.attempts + 1, std::move(feedback));
    ++in_flight;
  }
}

void Orchestrator::Scheduler::start_attempt(const TaskSpec& spec, int attempt,
                                            std::optional<std::string> feedback) {
  Workspace& ws = o_.workspace_;
  ws.ensure_task_dir(spec.task_id);
  TaskBrief brief = assemble_brief(spec, *plan_, ws, std::move(feedback));
  record(event::TaskDispatched{spec.task_id, attempt});

  auto at = std::make_shared<Attempt>();
  at->task = spec.task_id;
  at->attempt = attempt;
  at->owner = to_string(spec.task_id) + "." + std::to_string(attempt);
  owners_.insert(at->owner);
  live_.emplace(at->owner, at);
  at->thread = std::thread([this, at, b = std::move(brief)]() mutable { attempt_main(at, std::move(b)); });
}

void Orchestrator::Scheduler::attempt_main(std::shared_ptr<Attempt> at, TaskBrief brief) {
  try {
    Observer observer(*this, at);
    WorkerOptions wo;
    wo.attempt = at->attempt;
    wo.owner = at->owner;
    wo.workspace = &o_.workspace_;
    wo.observer = &observer;
    if (o_.options_.write_transcripts) {
      wo.transcript_path = o_.workspace_.task_dir(at->task) /
                           ("transcript.attempt-" + std::to_string(at->attempt) + ".jsonl");
    }
    std::unique_ptr<ToolHost> host = o_.options_.tool_hosts
                                         ? o_.options_.tool_hosts(*o_.executor_, at->task)
                                         : std::make_unique<ExecutorToolHost>(*o_.executor_);
    TaskResult result = run_task(brief, *o_.backends_.worker, *host, o_.config_, wo);

    Message fin;
    fin.type = Message::Type::kFinished;
    fin.attempt = at;
    fin.result = result;
    if (call(std::move(fin))) {
      std::vector<TaskSummary> accepted;
      for (const auto& t : plan_->tasks) {
        if (t.task_id == at->task) continue;
        if (auto sum = o_.workspace_.read_summary(t.task_id)) accepted.push_back(std::move(*sum));
      }
      AssessmentInput input = build_assessment_input(*plan_, brief.task, result, o_.workspace_,
                                                     accepted, o_.config_);
      write_assessment_manifest(o_.workspace_, input);
      Message v;
      v.type = Message::Type::kVerdict;
      v.attempt = at;
      v.assessment = assess_task(input, *plan_, *o_.backends_.assessor, o_.config_);
      post(std::move(v));
    }
  } catch (...) {
    Message f;
    f.type = Message::Type::kFailure;
    f.attempt = at;
    f.error = std::current_exception();
    post(std::move(f));
  }
  Message done;
  done.type = Message::Type::kExit;
  done.attempt = at;
  post(std::move(done));
}

// ---------------------------------------------------------------------------
// Verdicts

void Orchestrator::Scheduler::on_verdict(TaskId id, int attempt, Verdict v) {
  if (auto* acc = std::get_if<verdict::Accept>(&v)) {
    TaskSummary summary = acc->final_summary;
    summary.task_id = id;
    std::optional<std::string> rejected;
    try {
      o_.workspace_.write_summary(summary, o_.config_.summary_cap);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNotFound && e.code() != ErrorCode::kInvalidArgument) throw;
      rejected = e.what();
    }
    if (!rejected) {
      record(event::VerdictIssued{id, attempt, verdict::Accept{std::move(summary)},
                                  VerdictScope::kTask, false});
      return;
    }
    v = verdict::Revise{"the summary could not be published: " + *rejected, Severity::kMinor};
  }

  if (const auto* r = std::get_if<verdict::Revise>(&v)) {
    const ProjectState s = snapshot();
    const bool escalated = s.tasks.at(id).revisions + 1 > o_.config_.revise_budget;
    record(event::VerdictIssued{id, attempt, v, VerdictScope::kTask, escalated});
    if (escalated) {
      escalate(id, attempt);
    } else if (r->severity == Severity::kMajor) {
      o_.workspace_.archive_attempt(id, attempt);
    }
    return;
  }

  record(event::VerdictIssued{id, attempt, v, VerdictScope::kTask, false});
  if (const auto* rf = std::get_if<verdict::RedoFrom>(&v)) {
    redo(rf->target, rf->reason, id);
  } else if (const auto* h = std::get_if<verdict::Halt>(&v)) {
    halt(h->reason, "assessor", {id});
  }
}

void Orchestrator::Scheduler::escalate(TaskId id, int attempt) {
  const ProjectState s = snapshot();
  ProjectAssessmentInput in;
  in.plan = plan_.get();
  in.state = &s;
  in.accepted_summaries = accepted_summaries();
  in.trigger = id;
  in.feedback = revise_history(id);
  in.attempt = attempt;
  AssessmentResult pr = assess_project(in, *o_.backends_.assessor, o_.config_);
  record(event::VerdictIssued{id, attempt, pr.verdict, VerdictScope::kProject, false});
  if (const auto* rf = std::get_if<verdict::RedoFrom>(&pr.verdict)) {
    redo(rf->target, rf->reason, id);
  } else if (const auto* h = std::get_if<verdict::Halt>(&pr.verdict)) {
    halt(h->reason, "assessor", {id});
  }
  // Accept means continue: the fold marks the task Failed and the rest proceeds.
}

void Orchestrator::Scheduler::redo(TaskId target, const std::string& reason,
                                   std::optional<TaskId> trigger) {
  const ProjectState s = snapshot();
  TaskIdSet closure = invalidation_closure(*plan_, target, s.task_states());
  if (trigger && s.tasks.at(*trigger).state.in_flight()) closure.insert(*trigger);
  const Event inv = record(event::TasksInvalidated{closure, target, reason});

  std::vector<std::string> cancelled;
  for (auto& [owner, at] : live_) {
    if (!closure.count(at->task)) continue;
    at->cancelled = true;
    o_.executor_->cancel_owner(owner);
    cancelled.push_back(owner);
  }
  wait_for_exit(cancelled);
  finish_invalidation(closure, target, reason, inv.sequence_no);
}

void Orchestrator::Scheduler::finish_invalidation(const TaskIdSet& tasks, TaskId cause,
                                                  const std::string& reason, std::uint64_t tag) {
  Workspace& ws = o_.workspace_;
  const ProjectState s = snapshot();
  json archived = json::array();
  std::vector<std::string> produced_shared;
  for (TaskId id : tasks) {
    const int n = s.tasks.at(id).attempts;
    if (auto p = ws.archive_attempt(id, n)) {
      archived.push_back(ws.jail().relative(*p));
    }
    if (auto p = ws.archive_summary(id, n)) {
      archived.push_back(ws.jail().relative(*p));
      try {
        auto sum = parse_json(read_file_bytes(*p), "archived summary").get<TaskSummary>();
        for (const auto& a : sum.artifact_index) {
          if (a.path.starts_with("shared/")) produced_shared.push_back(a.path);
        }
      } catch (const std::exception&) {
      }
    }
  }
  const std::vector<std::string> retracted = ws.retract_shared(shared_paths_in(reason), tag);
  json untouched = json::array();
  for (const auto& p : produced_shared) {
    if (std::find(retracted.begin(), retracted.end(), p) == retracted.end()) untouched.push_back(p);
  }
  json report{{"cause", cause},         {"reason", reason},       {"tasks", tasks},
              {"archived", archived},   {"retracted", retracted}, {"shared_not_retracted", untouched}};
  write_file_atomic(ws.layout().archive / ("redo-" + std::to_string(tag) + ".json"),
                    report.dump(2) + "\n", o_.options_.fault, o_.config_.sync_journal);
  record(event::TasksRequeued{tasks});
}

// ---------------------------------------------------------------------------
// Halting

void Orchestrator::Scheduler::halt(const std::string& reason, const std::string& issued_by,
                                   TaskIdSet frontier) {
  const ProjectState s = snapshot();
  if (s.halt) return;
  for (const auto& [id, rec] : s.tasks) {
    if (rec.state.in_flight()) frontier.insert(id);
  }
  if (frontier.empty()) frontier = ready_set(*plan_, s.task_states());
  record(event::ProjectHalted{reason, frontier, issued_by});
  clear_halt_request(o_.workspace_);
  drain();
}

void Orchestrator::Scheduler::drain() {
  std::vector<std::string> owners;
  for (auto& [owner, at] : live_) {
    at->cancelled = true;
    owners.push_back(owner);
  }
  const auto deadline = SteadyClock::now() + o_.config_.halt_drain;
  while (!live_.empty() && SteadyClock::now() < deadline) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - SteadyClock::now());
    pump(std::clamp(left, std::chrono::milliseconds(1), std::chrono::milliseconds(50)), true);
  }
  for (const auto& owner : owners_) o_.executor_->cancel_owner(owner);
  while (!live_.empty()) pump(std::chrono::milliseconds(50), true);
}

void Orchestrator::Scheduler::abort_all() {
  for (auto& [owner, at] : live_) {
    at->cancelled = true;
    o_.executor_->cancel_owner(owner);
  }
  while (!live_.empty()) {
    std::deque<Message> batch;
    {
      std::unique_lock lock(qmu_);
      qcv_.wait_for(lock, std::chrono::milliseconds(50), [&] { return !queue_.empty(); });
      batch.swap(queue_);
    }
    for (auto& m : batch) {
      if (m.ack) m.ack->set_value(false);
      if (m.type == Message::Type::kExit) {
        auto it = live_.find(m.attempt->owner);
        if (it != live_.end()) {
          if (it->second->thread.joinable()) it->second->thread.join();
          live_.erase(it);
        }
      }
    }
  }
}

void Orchestrator::Scheduler::check_halt_requests() {
  std::optional<std::pair<std::string, std::string>> req;
  {
    std::lock_guard lock(o_.halt_mu_);
    req.swap(o_.halt_requested_);
  }
  if (!req) {
    if (auto reason = take_halt_request(o_.workspace_)) req.emplace(*reason, "operator");
  }
  if (req) halt(req->first, req->second, {});
}

// ---------------------------------------------------------------------------

RunOutcome Orchestrator::Scheduler::run() {
  plan_ = std::make_shared<const Plan>(*snapshot().plan);
  recover();
  while (true) {
    check_halt_requests();
    ProjectState s = snapshot();
    if (s.halt) {
      drain();
      return RunOutcome{RunStatus::kHalted, snapshot().halt, s.halt->reason};
    }
    if (fatal_) {
      abort_all();
      return RunOutcome{RunStatus::kFatal, std::nullopt, *fatal_};
    }
    if (s.all_accepted()) {
      if (!s.completed) record(event::ProjectCompleted{});
      return RunOutcome{RunStatus::kCompleted, std::nullopt, "all tasks accepted"};
    }
    dispatch();
    s = snapshot();
    if (live_.empty() && !s.halt && !s.all_accepted() && s.in_flight_count() == 0 && !fatal_) {
      TaskIdSet failed;
      TaskIdSet blocked;
      for (const auto& [id, rec] : s.tasks) {
        if (rec.state.is(Kind::kFailed)) failed.insert(id);
        if (rec.state.is(Kind::kPending)) blocked.insert(id);
      }
      std::string reason = "no runnable tasks remain";
      if (!failed.empty()) reason += "; failed: " + join_ids(failed);
      failed.insert(blocked.begin(), blocked.end());
      halt(reason, "engine", failed);
      continue;
    }
    pump(o_.options_.idle_poll);
  }
}

// ---------------------------------------------------------------------------
// Orchestrator

Orchestrator::Orchestrator(Workspace& workspace, Journal journal, Backends backends,
                           RunConfig config, OrchestratorOptions options)
    : workspace_(workspace),
      journal_(std::move(journal)),
      backends_(backends),
      config_(std::move(config)),
      options_(std::move(options)) {
  if (auto problems = validate_config(config_); !problems.empty()) {
    std::string text;
    for (const auto& p : problems) text += (text.empty() ? "" : "; ") + p;
    throw Error(ErrorCode::kConfig, "invalid configuration: " + text);
  }
  if (options_.clock == nullptr) {
    owned_clock_ = std::make_unique<SystemClock>();
    options_.clock = owned_clock_.get();
  }
  journal_.set_fault_injector(options_.fault);
  workspace_.set_fault_injector(options_.fault);
  workspace_.set_sync(config_.sync_journal);
  executor_ = std::make_unique<Executor>(workspace_, config_);
  JournalContents contents = Journal::read(journal_.path());
  state_ = fold_state(contents.events);
  events_ = std::move(contents.events);
}

Orchestrator::~Orchestrator() {
  workspace_.set_fault_injector(nullptr);
  if (executor_) executor_->kill_all();
}

ProjectState Orchestrator::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

bool Orchestrator::running() const {
  std::lock_guard lock(mu_);
  return running_;
}

void Orchestrator::set_listener(Listener listener) {
  std::lock_guard lock(mu_);
  listener_ = std::move(listener);
}

Event Orchestrator::record(EventPayload payload) {
  std::lock_guard lock(mu_);
  Event e{journal_.last_sequence_no() + 1, options_.clock->now(), std::move(payload)};
  ProjectState next = state_;
  apply_event(next, e);  // refuses transitions the fold would reject
  auto [written, line] = journal_.append(e.payload, e.timestamp);
  state_ = std::move(next);
  events_.push_back(written);
  if (listener_) listener_(written, line);
  return written;
}

Event Orchestrator::propose(Plan plan, std::optional<std::string> resume_instruction) {
  if (running()) throw Error(ErrorCode::kConflict, "a run is active");
  if (auto report = validate_plan(plan); !report.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "invalid plan:\n" + render(report));
  }
  workspace_.save_plan(plan);
  return record(event::PlanProposed{std::move(plan), std::move(resume_instruction)});
}

PlanningSession Orchestrator::plan(const ProjectSpec& spec, InteractionChannel& channel) {
  const ProjectState s = state();
  if (s.approved()) throw Error(ErrorCode::kFailedPrecondition, "plan already approved");
  if (s.proposed) {
    throw Error(ErrorCode::kFailedPrecondition,
                "plan version " + std::to_string(s.proposed->version) + " awaits approval");
  }
  PlanningOptions po;
  po.version = s.latest_version + 1;
  po.rejection_comment = last_rejection_comment();
  PlanningSession session = plan_project(spec, *backends_.planner, channel, config_, po);
  if (session.succeeded()) propose(session.plan());
  return session;
}

ApprovalOutcome Orchestrator::decide(int version, Decision decision, const std::string& actor,
                                     const std::string& comment) {
  if (running()) throw Error(ErrorCode::kConflict, "a run is active");
  const ProjectState s = state();
  ApprovalOutcome out = approve_plan(s, version, decision, actor, comment);
  if (!out.event) return out;
  record(*out.event);
  if (decision == Decision::kApprove && s.proposed_resume_instruction && s.halt) {
    record(event::ProjectResumed{*s.proposed_resume_instruction});
  }
  return out;
}

Event Orchestrator::propose_resume(const std::string& instruction) {
  const ProjectState s = state();
  if (!s.halt) throw Error(ErrorCode::kFailedPrecondition, "project is not halted");
  if (s.proposed) {
    throw Error(ErrorCode::kConflict,
                "plan version " + std::to_string(s.proposed->version) + " already awaits approval");
  }
  Plan revised = revise_plan_for_resume(s, instruction, *backends_.planner, config_);
  return propose(std::move(revised), instruction);
}

Event Orchestrator::halt(const std::string& reason, const std::string& issued_by) {
  if (running()) throw Error(ErrorCode::kConflict, "a run is active; request the halt instead");
  const ProjectState s = state();
  if (!s.approved()) throw Error(ErrorCode::kFailedPrecondition, "plan not approved");
  if (s.halt) throw Error(ErrorCode::kFailedPrecondition, "project is already halted");
  if (s.completed) throw Error(ErrorCode::kFailedPrecondition, "project is completed");
  TaskIdSet frontier;
  for (const auto& [id, rec] : s.tasks) {
    if (rec.state.in_flight()) frontier.insert(id);
  }
  if (frontier.empty()) frontier = ready_set(*s.plan, s.task_states());
  Event e = record(event::ProjectHalted{reason, frontier, issued_by});
  clear_halt_request(workspace_);
  return e;
}

void Orchestrator::request_halt(const std::string& reason, const std::string& issued_by) {
  std::lock_guard lock(halt_mu_);
  halt_requested_.emplace(reason, issued_by);
  if (active_ != nullptr) active_->wake();
}

std::optional<std::string> Orchestrator::last_rejection_comment() const {
  std::lock_guard lock(mu_);
  for (auto it = events_.rbegin(); it != events_.rend(); ++it) {
    if (const auto* r = std::get_if<event::PlanRejected>(&it->payload)) return r->comment;
    if (std::holds_alternative<event::PlanProposed>(it->payload) ||
        std::holds_alternative<event::PlanApproved>(it->payload)) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

RunOutcome Orchestrator::run() {
  {
    std::lock_guard lock(mu_);
    if (running_) throw Error(ErrorCode::kConflict, "a run is already active");
    if (!state_.plan) throw Error(ErrorCode::kFailedPrecondition, "plan not approved");
    if (state_.completed) return RunOutcome{RunStatus::kCompleted, std::nullopt, "already completed"};
    if (state_.halt) {
      throw Error(ErrorCode::kFailedPrecondition, "project is halted; use resume");
    }
    running_ = true;
  }
  struct Reset {
    Orchestrator& o;
    ~Reset() {
      std::lock_guard lock(o.mu_);
      o.running_ = false;
    }
  } reset{*this};
  Scheduler scheduler(*this);
  return scheduler.run();
}

}  // namespace steward
