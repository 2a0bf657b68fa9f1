// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Run with a criterion name (AC1 .. AC8) to run just that one.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "steward/assessor.hpp"
#include "steward/serialize.hpp"
#include "steward/worker.hpp"

using namespace steward;
using namespace steward::testing;
namespace fs = std::filesystem;
using Seconds = std::chrono::duration<double>;

namespace {

struct Check {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::vector<Event> events_of(const Workspace& ws) { return Journal::read(ws.journal_path()).events; }

RunConfig config_for(int concurrency) {
  RunConfig c = fast_config();
  c.concurrency_limit = concurrency;
  return c;
}

ProjectSpec spec_for(const std::string& id, const RunConfig& config) {
  return ProjectSpec{id, "Carry out the planned analysis and report the results.", {}, config};
}

// ---------------------------------------------------------------------------
// AC1 / AC2: single-task subtask chains against the stochastic model.

struct ChainStats {
  int runs = 0;
  int completed = 0;
  double seconds = 0;
};

ChainStats run_chains(int runs, int subtasks, int retries, double p, std::uint64_t base_seed) {
  RunConfig config;
  config.step_budget = subtasks * (retries + 1) + 5;
  config.assess_reprompt_limit = 0;
  StochasticBackend model(subtasks, retries);
  TaskSpec task;
  task.task_id = TaskId(1);
  task.title = "subtask chain";
  task.objective = "Complete every subtask in order.";
  task.success_criteria = {"all subtasks succeeded"};
  Plan plan{"chain", {task}, 1};
  TaskBrief brief{task, {}, "tasks/1", "shared", std::nullopt};

  ChainStats stats;
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < runs; ++i) {
    SimulatedToolHost tools(StochasticProfile{p, splitmix64(base_seed + static_cast<std::uint64_t>(i))});
    WorkerOptions wo;
    TaskResult result = run_task(brief, model, tools, config, wo);
    AssessmentInput in;
    in.goal = plan.goal;
    in.plan_context = plan.tasks;
    in.task = task;
    in.attempt = 1;
    in.terminal = std::string(to_string(result.terminal));
    in.terminal_detail = result.detail;
    in.draft_summary = result.draft_summary;
    const AssessmentResult verdict = assess_task(in, plan, model, config);
    stats.completed += verdict_kind(verdict.verdict) == "accept" ? 1 : 0;
    ++stats.runs;
  }
  stats.seconds = Seconds(std::chrono::steady_clock::now() - start).count();
  return stats;
}

Check ac1() {
  const ChainStats s = run_chains(10000, 100, 0, 0.99, 0xA11CE);
  const double frac = static_cast<double>(s.completed) / s.runs;
  const double exact = std::pow(0.99, 100);
  const bool pass = std::abs(frac - 0.366) <= 0.015 && s.seconds < 60.0;
  return {pass, fmt("completion %.4f over %d runs (target 0.366 +/- 0.015, exact %.4f), %.1f s (< 60 s)",
                    frac, s.runs, exact, s.seconds)};
}

Check ac2() {
  const ChainStats s = run_chains(10000, 100, 3, 0.99, 0xB0B);
  const double frac = static_cast<double>(s.completed) / s.runs;
  const double analytic = std::pow(1.0 - std::pow(0.01, 4), 100);
  // Binomial standard error at the analytic rate; three of them.
  const double tol = 3.0 * std::sqrt(analytic * (1 - analytic) / s.runs) + 1.0 / s.runs;
  const bool pass = frac >= 0.9999 && std::abs(frac - analytic) <= tol;
  return {pass, fmt("completion %.5f over %d runs with r=3 (>= 0.9999; analytic %.6f, tol %.5f), %.1f s",
                    frac, s.runs, analytic, tol, s.seconds)};
}

// ---------------------------------------------------------------------------
// AC3: rollback from task 11 to task 8.

Check ac3() {
  TempDir dir("steward-ac3");
  const RunConfig config = config_for(1);
  Project p = init_project(dir.path() / "ws", spec_for("rollback-11", config), chain_plan(11));
  ScriptedBackend backend(Script()
                              .default_worker()
                              .default_assessor()
                              .verdict(11, 1,
                                       {{"kind", "redo_from"},
                                        {"target", 8},
                                        {"reason", "task 8 must be redone under stricter conditions"}})
                              .entries());
  auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config);
  std::map<int, std::string> before;
  orch->set_listener([&](const Event& e, const std::string&) {
    if (std::holds_alternative<event::TasksInvalidated>(e.payload)) before = summary_bytes(*p.workspace);
  });
  const RunOutcome outcome = orch->run();
  orch->set_listener(nullptr);
  const auto after = summary_bytes(*p.workspace);
  const auto events = events_of(*p.workspace);

  std::vector<std::string> problems;
  if (outcome.status != RunStatus::kCompleted) problems.push_back("run did not complete");
  const TaskIdSet expected{TaskId(8), TaskId(9), TaskId(10), TaskId(11)};
  int invalidations = 0;
  bool completed_last = !events.empty() && std::holds_alternative<event::ProjectCompleted>(events.back().payload);
  std::set<int> redispatched;
  bool seen_invalidation = false;
  for (const auto& e : events) {
    if (const auto* inv = std::get_if<event::TasksInvalidated>(&e.payload)) {
      ++invalidations;
      seen_invalidation = true;
      if (inv->tasks != expected) problems.push_back("invalidated set differs");
    }
    if (const auto* d = std::get_if<event::TaskDispatched>(&e.payload); d && seen_invalidation) {
      redispatched.insert(d->task_id.value);
    }
  }
  if (invalidations != 1) problems.push_back("expected one TasksInvalidated");
  if (redispatched != std::set<int>{8, 9, 10, 11}) problems.push_back("tasks 8-11 not re-executed");
  if (!completed_last) problems.push_back("ProjectCompleted missing");
  for (int id = 8; id <= 11; ++id) {
    if (!fs::is_directory(p.workspace->layout().archive / (std::to_string(id) + ".attempt-1"))) {
      problems.push_back("no archive for task " + std::to_string(id));
    }
  }
  for (int id = 8; id <= 10; ++id) {
    if (!fs::exists(p.workspace->layout().archive / "summaries" / ("task-" + std::to_string(id) + ".attempt-1.json"))) {
      problems.push_back("no archived summary for task " + std::to_string(id));
    }
  }
  int identical = 0;
  for (int id = 1; id <= 7; ++id) {
    if (before.count(id) && after.count(id) && before.at(id) == after.at(id)) ++identical;
  }
  if (identical != 7) problems.push_back("summaries 1-7 changed");
  std::string detail = fmt("invalidated {8,9,10,11} x%d, re-dispatched %zu, summaries 1-7 identical %d/7",
                           invalidations, redispatched.size(), identical);
  for (const auto& pr : problems) detail += "; " + pr;
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------------------
// AC4: 35 independent tasks under a concurrency limit of 8.

Check ac4() {
  constexpr int kTasks = 35;
  constexpr int kLimit = 8;
  constexpr double kDuration = 1.0;  // seconds of scripted work per task
  TempDir dir("steward-ac4");
  const RunConfig config = config_for(kLimit);
  Project p = init_project(dir.path() / "ws", spec_for("parallel-35", config), independent_plan(kTasks));
  ScriptedBackend backend(
      Script()
          .default_worker("sleep 1 && printf 'done %s\\n' {{task_id}} > \"$STEWARD_SHARED/task-{{task_id}}.txt\"")
          .default_assessor()
          .entries());
  auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config);
  const auto start = std::chrono::steady_clock::now();
  const RunOutcome outcome = orch->run();
  const double elapsed = Seconds(std::chrono::steady_clock::now() - start).count();
  const auto events = events_of(*p.workspace);
  const int peak = max_concurrent_running(events);
  int accepted = 0;
  for (const auto& [id, rec] : orch->state().tasks) accepted += rec.state.is(TaskState::Kind::kAccepted);
  const double bound = std::ceil(static_cast<double>(kTasks) / kLimit) * kDuration * 1.25;
  const bool pass = outcome.status == RunStatus::kCompleted && peak <= kLimit &&
                    accepted == kTasks && elapsed <= bound;
  return {pass, fmt("peak running %d (<= %d), accepted %d/%d, wall %.2f s (<= %.2f s)", peak, kLimit,
                    accepted, kTasks, elapsed, bound)};
}

// ---------------------------------------------------------------------------
// AC5: halt at task 6 of 12, resume with a revised suffix.

Check ac5() {
  TempDir dir("steward-ac5");
  const RunConfig config = config_for(1);
  const FixtureProject fx = polymer_fixture();
  Project p = init_project(dir.path() / "ws", spec_for(fx.name, config), fx.plan);
  Plan revised = fx.plan;
  for (auto& t : revised.tasks) {
    if (t.task_id.value >= 6) t.hints = "Install the missing solver before starting.";
  }
  json revised_args = revised;
  revised_args.erase("version");
  ScriptedBackend backend(
      Script()
          .default_worker()
          .default_assessor()
          .verdict(6, 1, {{"kind", "halt"}, {"reason", "the solver needed for this step is missing"}})
          .raw({{"match", {{"role", "planner"}, {"scope", "resume"}}},
                {"response", response("", {call("propose_plan", revised_args, "p1")})}})
          .entries());
  std::vector<std::string> problems;
  auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config);
  const RunOutcome first = orch->run();
  if (first.status != RunStatus::kHalted) problems.push_back("first run did not halt");
  const auto before = summary_bytes(*p.workspace);
  orch->propose_resume("install the missing solver, then continue from task 6");
  const ProjectState mid = orch->state();
  if (!mid.proposed) {
    problems.push_back("no resume plan proposed");
  } else {
    orch->decide(mid.proposed->version, Decision::kApprove, "acceptance");
  }
  const RunOutcome second = orch->run();
  if (second.status != RunStatus::kCompleted) problems.push_back("resumed run did not complete");
  const auto after = summary_bytes(*p.workspace);
  int identical = 0;
  for (int id = 1; id <= 5; ++id) {
    if (before.count(id) && after.count(id) && before.at(id) == after.at(id)) ++identical;
  }
  if (identical != 5) problems.push_back("summaries 1-5 changed");
  if (before.size() != 5) problems.push_back("expected 5 accepted summaries at the halt");
  bool between = false;
  int dispatched_between = 0;
  for (const auto& e : events_of(*p.workspace)) {
    if (std::holds_alternative<event::ProjectHalted>(e.payload)) between = true;
    if (std::holds_alternative<event::ProjectResumed>(e.payload)) between = false;
    if (between && std::holds_alternative<event::TaskDispatched>(e.payload)) ++dispatched_between;
  }
  if (dispatched_between != 0) problems.push_back("dispatch between halt and resume");
  std::string detail = fmt("halted at task 6 then %s; summaries 1-5 identical %d/5; dispatches while halted %d",
                           std::string(to_string(second.status)).c_str(), identical, dispatched_between);
  for (const auto& pr : problems) detail += "; " + pr;
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------------------
// AC6: 200 random crash points over the 12-task fixture.

Check ac6() {
  constexpr int kTrials = 200;
  TempDir dir("steward-ac6");
  RunConfig config = config_for(1);
  config.sync_journal = false;
  const FixtureProject fx = polymer_fixture();
  const auto entries = Script().default_worker().default_assessor().entries();
  std::uint64_t points = 0;
  std::map<int, std::string> expected;
  {
    Project p = init_project(dir.path() / "clean", spec_for(fx.name, config), fx.plan);
    ScriptedBackend backend(entries);
    FaultInjector counter;
    auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config, nullptr, &counter);
    if (orch->run().status != RunStatus::kCompleted) return {false, "clean run did not complete"};
    points = counter.count();
    expected = summary_bytes(*p.workspace);
  }
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<std::uint64_t> pick(1, points);
  int recovered = 0, identical = 0, clean_procs = 0, crashed = 0;
  std::string first_failure;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::uint64_t k = pick(rng);
    const fs::path root = dir.path() / ("t" + std::to_string(trial));
    Project p = init_project(root, spec_for(fx.name, config), fx.plan);
    try {
      ScriptedBackend backend(entries);
      FaultInjector fault(k);
      auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config, nullptr, &fault);
      orch->run();
    } catch (const SimulatedCrash&) {
      ++crashed;
    } catch (const std::exception& e) {
      if (first_failure.empty()) first_failure = fmt("point %llu: %s", (unsigned long long)k, e.what());
    }
    try {
      ScriptedBackend backend(entries);
      auto orch = open_orchestrator(*p.workspace, Backends::all(backend), config);
      if (orch->run().status == RunStatus::kCompleted) ++recovered;
      if (summary_bytes(*p.workspace) == expected) ++identical;
    } catch (const std::exception& e) {
      if (first_failure.empty()) first_failure = fmt("point %llu: %s", (unsigned long long)k, e.what());
    }
    if (child_process_count() == 0) ++clean_procs;
    fs::remove_all(root);
  }
  const bool pass = recovered == kTrials && identical == kTrials && clean_procs == kTrials;
  std::string detail = fmt("%d trials over %llu fault points (%d crashed): recovered %d/%d, identical summaries %d/%d, no orphans %d/%d",
                           kTrials, (unsigned long long)points, crashed, recovered, kTrials, identical,
                           kTrials, clean_procs, kTrials);
  if (!first_failure.empty()) detail += "; first failure " + first_failure;
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// AC7 / AC8: full-size fixtures.

struct FixtureRun {
  RunStatus status = RunStatus::kFatal;
  double seconds = 0;
  std::string digest;
  std::vector<ChatRequest> requests;
};

FixtureRun run_fixture(const FixtureProject& fx, const fs::path& root) {
  const RunConfig config = config_for(1);
  Project p = init_project(root, spec_for(fx.name, config), fx.plan);
  ScriptedBackend scripted(Script().planner(fx.plan).default_worker().default_assessor().canaries().entries());
  CapturingBackend capture(scripted);
  LogicalClock clock;
  auto orch = open_orchestrator(*p.workspace, Backends::all(capture), config, &clock);
  FixtureRun r;
  const auto start = std::chrono::steady_clock::now();
  r.status = orch->run().status;
  r.seconds = Seconds(std::chrono::steady_clock::now() - start).count();
  r.digest = journal_digest(events_of(*p.workspace));
  r.requests = capture.requests();
  return r;
}

std::vector<FixtureProject> fixtures() {
  return {alloy_fixture(), polymer_fixture(), electrolyte_fixture(), kaggle_fixture()};
}

std::string request_text(const ChatRequest& r) { return json(r).dump(); }

Check ac7() {
  TempDir dir("steward-ac7");
  long checked = 0, leaks = 0, own_seen = 0;
  std::string first_leak;
  for (const auto& fx : fixtures()) {
    const FixtureRun run = run_fixture(fx, dir.path() / fx.name);
    if (run.status != RunStatus::kCompleted) return {false, fx.name + " did not complete"};
    for (const auto& req : run.requests) {
      const std::string text = request_text(req);
      ++checked;
      for (const auto& t : fx.plan.tasks) {
        if (text.find(canary_for(t.task_id.value)) == std::string::npos) continue;
        const bool own = req.role == Role::kWorker && req.meta.task_id == t.task_id;
        if (own) {
          ++own_seen;
        } else {
          ++leaks;
          if (first_leak.empty()) {
            first_leak = fx.name + ": canary of task " + std::to_string(t.task_id.value) + " in " +
                         std::string(to_string(req.role)) + " request " + describe_request_key(req);
          }
        }
      }
    }
  }
  // The canaries must actually be planted, or the check proves nothing.
  const bool pass = leaks == 0 && own_seen > 0;
  std::string detail = fmt("%ld requests over 4 fixtures, %ld foreign canaries (own-context sightings %ld)",
                           checked, leaks, own_seen);
  if (!first_leak.empty()) detail += "; " + first_leak;
  return {pass, detail};
}

Check ac8() {
  TempDir dir("steward-ac8");
  bool pass = true;
  std::string detail;
  for (const auto& fx : fixtures()) {
    const FixtureRun a = run_fixture(fx, dir.path() / (fx.name + "-a"));
    const FixtureRun b = run_fixture(fx, dir.path() / (fx.name + "-b"));
    const bool ok = a.status == RunStatus::kCompleted && b.status == RunStatus::kCompleted &&
                    a.digest == b.digest && a.seconds < 300 && b.seconds < 300;
    pass = pass && ok;
    detail += fmt("%s%s(%zu tasks) %s %.2f s digest %.12s%s", detail.empty() ? "" : "; ",
                  fx.name.c_str(), fx.plan.tasks.size(),
                  std::string(to_string(a.status)).c_str(), std::max(a.seconds, b.seconds),
                  a.digest.c_str(), a.digest == b.digest ? "" : " (differs between runs)");
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Check()>>> criteria{
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4},
      {"AC5", ac5}, {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}};
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Check v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::cout << name << " " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
