#include "fixtures.hpp"

#include <dirent.h>
#include <unistd.h>

#include <fstream>
#include <random>

#include "steward/digest.hpp"
#include "steward/error.hpp"
#include "steward/journal.hpp"
#include "steward/serialize.hpp"
#include "steward/workspace.hpp"

namespace steward::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  for (int i = 0; i < 100; ++i) {
    fs::path p = fs::temp_directory_path() /
                 (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(rng() % 1000000007));
    std::error_code ec;
    if (fs::create_directory(p, ec)) {
      path_ = fs::canonical(p);
      return;
    }
  }
  throw std::runtime_error("cannot create temp dir");
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::permissions(path_, fs::perms::owner_all, fs::perm_options::add, ec);
  fs::remove_all(path_, ec);
}

TaskSpec make_task(int id, std::set<int> deps, std::string title) {
  TaskSpec t;
  t.task_id = TaskId(id);
  t.title = title.empty() ? "Task " + std::to_string(id) : std::move(title);
  t.objective = "Produce the output of step " + std::to_string(id) + ".";
  t.success_criteria = {"shared/task-" + std::to_string(id) + ".txt exists and is non-empty"};
  for (int d : deps) t.dependencies.insert(TaskId(d));
  t.expected_artifacts = {"shared/task-" + std::to_string(id) + ".txt"};
  return t;
}

Plan plan_from(std::string goal, std::vector<TaskSpec> tasks) {
  Plan p;
  p.goal = std::move(goal);
  p.tasks = std::move(tasks);
  p.version = 1;
  return p;
}

Plan chain_plan(int n) {
  std::vector<TaskSpec> tasks;
  for (int i = 1; i <= n; ++i) tasks.push_back(make_task(i, i == 1 ? std::set<int>{} : std::set<int>{i - 1}));
  return plan_from("Run a " + std::to_string(n) + "-step chain", std::move(tasks));
}

Plan independent_plan(int n) {
  std::vector<TaskSpec> tasks;
  for (int i = 1; i <= n; ++i) tasks.push_back(make_task(i, {}, "Run " + std::to_string(i)));
  return plan_from("Run " + std::to_string(n) + " independent jobs", std::move(tasks));
}

namespace {

ProjectSpec spec_for(const std::string& id, const std::string& instruction) {
  ProjectSpec s;
  s.project_id = id;
  s.instruction = instruction;
  return s;
}

FixtureProject build(const std::string& name, const std::string& instruction,
                     const std::string& goal,
                     const std::vector<std::tuple<int, std::set<int>, std::string>>& shape) {
  std::vector<TaskSpec> tasks;
  for (const auto& [id, deps, title] : shape) tasks.push_back(make_task(id, deps, title));
  return FixtureProject{name, spec_for(name, instruction), plan_from(goal, std::move(tasks))};
}

}  // namespace

FixtureProject alloy_fixture() {
  std::vector<std::tuple<int, std::set<int>, std::string>> shape{
      {1, {}, "Prepare composition grid"},
      {2, {1}, "Validate interaction model on a small cell"},
  };
  for (int i = 3; i <= 7; ++i) {
    shape.emplace_back(i, std::set<int>{2}, "Sampling run at condition " + std::to_string(i - 2));
  }
  shape.emplace_back(8, std::set<int>{3, 4, 5, 6, 7}, "Aggregate ordering statistics");
  shape.emplace_back(9, std::set<int>{8}, "Write comparison report");
  return build("screening-9",
               "Screen a grid of ternary compositions with lattice sampling at five temperatures, "
               "then compare the ordering statistics across the grid and report the trend.",
               "Compare ordering across a composition grid", shape);
}

FixtureProject polymer_fixture() {
  const char* titles[] = {"Collect raw property table",  "Clean and deduplicate records",
                          "Compute structural descriptors", "Split train and test sets",
                          "Fit baseline regressor",      "Tune feature selection",
                          "Fit gradient boosted model",  "Cross-validate candidates",
                          "Select final model",          "Score held-out set",
                          "Plot parity and residuals",   "Write model card"};
  std::vector<std::tuple<int, std::set<int>, std::string>> shape;
  for (int i = 1; i <= 12; ++i) {
    shape.emplace_back(i, i == 1 ? std::set<int>{} : std::set<int>{i - 1}, titles[i - 1]);
  }
  return build("chain-12",
               "Build a regression model that predicts a material property from structure "
               "strings, report held-out accuracy and document how to reuse the model.",
               "Predict a property from structure strings", shape);
}

FixtureProject electrolyte_fixture() {
  std::vector<std::tuple<int, std::set<int>, std::string>> shape{
      {1, {}, "Assemble reference cell"},
      {2, {1}, "Relax the cell"},
      {3, {2}, "Equilibrate at zero field"},
  };
  for (int i = 4; i <= 9; ++i) {
    shape.emplace_back(i, std::set<int>{3}, "Driven run at field level " + std::to_string(i - 3));
  }
  shape.emplace_back(10, std::set<int>{4, 5, 6}, "Extract low-field transport");
  shape.emplace_back(11, std::set<int>{7, 8, 9}, "Extract high-field transport");
  shape.emplace_back(12, std::set<int>{10, 11}, "Fit field response");
  shape.emplace_back(13, std::set<int>{12}, "Estimate uncertainty");
  shape.emplace_back(14, std::set<int>{12}, "Compare with the zero-field limit");
  shape.emplace_back(15, std::set<int>{13, 14}, "Assemble figures");
  shape.emplace_back(16, std::set<int>{15}, "Write summary report");
  return build("field-16",
               "Measure how ionic transport in a solid conductor responds to an applied field, "
               "fit the response and report it with uncertainty.",
               "Characterize transport under an applied field", shape);
}

FixtureProject kaggle_fixture() {
  std::vector<std::tuple<int, std::set<int>, std::string>> shape;
  for (int i = 1; i <= 27; ++i) {
    std::set<int> deps;
    if (i > 1) deps.insert(i - 1);
    if (i >= 4 && i % 4 == 0) deps.insert(i - 3);
    shape.emplace_back(i, deps, "Pipeline stage " + std::to_string(i));
  }
  return build("pipeline-27",
               "Enter a tabular prediction competition: explore the data, engineer features, "
               "train and ensemble models and prepare a submission file.",
               "Produce a ranked submission for a tabular competition", shape);
}

// ---------------------------------------------------------------------------

json call(const std::string& name, const json& arguments, const std::string& id) {
  return json{{"name", name}, {"arguments", arguments}, {"call_id", id}};
}

json response(const std::string& text, std::vector<json> calls) {
  return json{{"text", text}, {"tool_calls", calls}};
}

std::string canary_for(int task) { return "CANARY-" + std::to_string(task) + "-7f3a"; }

Script& Script::planner(const Plan& plan) {
  json args = plan;
  args.erase("version");
  return raw(json{{"match", {{"role", "planner"}, {"scope", "plan"}}},
                  {"response", response("", {call("propose_plan", args, "p1")})}});
}

Script& Script::default_worker(const std::string& command) {
  const std::string cmd =
      command.empty()
          ? "printf 'output of task %s\\n' {{task_id}} > \"$STEWARD_SHARED/task-{{task_id}}.txt\""
          : command;
  lines_.push_back(json{{"match", {{"role", "worker"}, {"step", 1}}},
                        {"response", response("step one",
                                              {call("run_command", {{"command", cmd}},
                                                    "t{{task_id}}-s1")})}});
  json summary{{"outcome", "task {{task_id}} produced its output"},
               {"artifact_index", json::array({{{"path", "shared/task-{{task_id}}.txt"},
                                                {"description", "primary output"}}})},
               {"usage_notes", "read as plain text"},
               {"data_formats", "text"},
               {"metrics", json::array()}};
  lines_.push_back(json{{"match", {{"role", "worker"}, {"step", 2}}},
                        {"response", response("done", {call("task_complete", {{"summary", summary}},
                                                              "t{{task_id}}-s2")})}});
  return *this;
}

Script& Script::default_assessor() {
  raw(json{{"match", {{"role", "assessor"}, {"scope", "task"}}},
           {"response", response("", {call("issue_verdict", {{"kind", "accept"}}, "v1")})}});
  raw(json{{"match", {{"role", "assessor"}, {"scope", "preflight"}}},
           {"response", response("", {call("issue_verdict", {{"kind", "accept"}}, "v1")})}});
  return raw(json{{"match", {{"role", "assessor"}, {"scope", "project"}}},
                  {"response", response("", {call("issue_verdict",
                                                  {{"kind", "halt"},
                                                   {"reason", "retries exhausted"}},
                                                  "v1")})}});
}

Script& Script::canaries() {
  canaries_ = true;
  return *this;
}

Script& Script::worker(int task, std::optional<int> attempt, int step, const json& resp) {
  json m{{"role", "worker"}, {"task_id", task}, {"step", step}};
  if (attempt) m["attempt"] = *attempt;
  return raw(json{{"match", m}, {"response", resp}});
}

Script& Script::verdict(int task, std::optional<int> attempt, const json& args,
                        const std::string& scope) {
  json m{{"role", "assessor"}, {"scope", scope}, {"task_id", task}};
  if (attempt) m["attempt"] = *attempt;
  return raw(json{{"match", m}, {"response", response("", {call("issue_verdict", args, "v1")})}});
}

Script& Script::raw(const json& line) {
  lines_.push_back(line);
  return *this;
}

std::string Script::text() const {
  std::string out;
  for (json line : lines_) {
    if (canaries_ && line.at("match").value("role", "") == "worker") {
      line["response"]["text"] = "private note CANARY-{{task_id}}-7f3a";
    }
    out += line.dump() + "\n";
  }
  return out;
}

std::vector<ScriptEntry> Script::entries() const {
  return ScriptedBackend::parse_script(text(), "fixture script");
}

void Script::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  out << text();
}

ChatResponse CapturingBackend::complete(const ChatRequest& request) {
  {
    std::lock_guard lock(mu_);
    requests_.push_back(request);
  }
  return inner_.complete(request);
}

std::vector<ChatRequest> CapturingBackend::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

// ---------------------------------------------------------------------------

Project init_project(const fs::path& root, const ProjectSpec& spec, const Plan& plan, bool sync) {
  Project p;
  p.root = root;
  p.workspace = std::make_unique<Workspace>(Workspace::init(root));
  p.workspace->save_project(spec);
  p.workspace->set_sync(sync);
  {
    Journal::create(p.workspace->journal_path(), spec.project_id, sync);
  }
  RunConfig cfg = spec.config;
  cfg.sync_journal = sync;
  ScriptedBackend none({});
  auto orch = open_orchestrator(*p.workspace, Backends::all(none), cfg);
  orch->propose(plan);
  orch->decide(plan.version, Decision::kApprove, "tester");
  return p;
}

std::unique_ptr<Orchestrator> open_orchestrator(Workspace& ws, Backends backends,
                                                const RunConfig& config, Clock* clock,
                                                FaultInjector* fault) {
  OrchestratorOptions opts;
  opts.clock = clock;
  opts.fault = fault;
  opts.idle_poll = std::chrono::milliseconds(20);
  return std::make_unique<Orchestrator>(ws, Journal::open(ws.journal_path(), config.sync_journal),
                                        backends, config, opts);
}

int max_concurrent_running(const std::vector<Event>& events) {
  ProjectState s;
  int best = 0;
  for (const auto& e : events) {
    apply_event(s, e);
    best = std::max(best, s.running_count());
  }
  return best;
}

std::string journal_digest(const std::vector<Event>& events) {
  Sha256 h;
  for (const auto& e : events) {
    h.update(canonical_without_timestamp(e));
    h.update("\n");
  }
  return h.hex();
}

std::map<int, std::string> summary_bytes(const Workspace& ws) {
  std::map<int, std::string> out;
  for (const auto& entry : fs::directory_iterator(ws.layout().summaries)) {
    const std::string name = entry.path().filename().string();
    if (!name.starts_with("task-") || !name.ends_with(".json")) continue;
    out[std::stoi(name.substr(5))] = read_file_bytes(entry.path());
  }
  return out;
}

int child_process_count() {
  const pid_t self = ::getpid();
  int count = 0;
  DIR* dir = ::opendir("/proc");
  if (dir == nullptr) return 0;
  while (dirent* ent = ::readdir(dir)) {
    const std::string name = ent->d_name;
    if (name.empty() || name.find_first_not_of("0123456789") != std::string::npos) continue;
    std::ifstream stat("/proc/" + name + "/stat");
    std::string line;
    if (!std::getline(stat, line)) continue;
    const auto close = line.rfind(')');
    if (close == std::string::npos) continue;
    std::istringstream rest(line.substr(close + 2));
    char state = 0;
    pid_t ppid = 0;
    rest >> state >> ppid;
    if (ppid == self) ++count;
  }
  ::closedir(dir);
  return count;
}

RunConfig fast_config() {
  RunConfig c;
  c.sync_journal = false;
  c.halt_drain = std::chrono::milliseconds(200);
  c.job_poll_interval = std::chrono::milliseconds(20);
  return c;
}

}  // namespace steward::testing
