#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steward/backend.hpp"
#include "steward/clock.hpp"
#include "steward/orchestrator.hpp"
#include "steward/types.hpp"

namespace steward::testing {

using nlohmann::json;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "steward");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

TaskSpec make_task(int id, std::set<int> deps, std::string title = {});
Plan plan_from(std::string goal, std::vector<TaskSpec> tasks);
Plan chain_plan(int n);
Plan independent_plan(int n);

// Named project shapes at the sizes used by the end-to-end suite.
struct FixtureProject {
  std::string name;
  ProjectSpec spec;
  Plan plan;
};
FixtureProject alloy_fixture();      // 9 tasks
FixtureProject polymer_fixture();    // 12 tasks
FixtureProject electrolyte_fixture();  // 16 tasks
FixtureProject kaggle_fixture();     // 27 tasks

// Builds line-delimited scripts. Defaults: every worker writes
// shared/task-<id>.txt with a shell command on step 1 and calls task_complete
// on step 2; every assessor accepts; the planner proposes the plan.
class Script {
 public:
  Script& planner(const Plan& plan);
  Script& default_worker(const std::string& command = {});
  Script& default_assessor();
  // Adds an assistant text with a per-task marker on every worker step.
  Script& canaries();
  Script& worker(int task, std::optional<int> attempt, int step, const json& response);
  Script& verdict(int task, std::optional<int> attempt, const json& verdict_args,
                  const std::string& scope = "task");
  Script& raw(const json& line);

  std::string text() const;
  std::vector<ScriptEntry> entries() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<json> lines_;
  bool canaries_ = false;
};

json call(const std::string& name, const json& arguments, const std::string& id = "c1");
json response(const std::string& text, std::vector<json> calls);
std::string canary_for(int task);

// Records every request it forwards.
class CapturingBackend final : public Backend {
 public:
  explicit CapturingBackend(Backend& inner) : inner_(inner) {}
  ChatResponse complete(const ChatRequest& request) override;
  std::vector<ChatRequest> requests() const;

 private:
  Backend& inner_;
  mutable std::mutex mu_;
  std::vector<ChatRequest> requests_;
};

// Initializes a workspace with the project and an approved plan.
struct Project {
  std::unique_ptr<Workspace> workspace;
  std::filesystem::path root;
};
Project init_project(const std::filesystem::path& root, const ProjectSpec& spec, const Plan& plan,
                     bool sync = false);

std::unique_ptr<Orchestrator> open_orchestrator(Workspace& ws, Backends backends,
                                                const RunConfig& config, Clock* clock = nullptr,
                                                FaultInjector* fault = nullptr);

// Maximum concurrent in-flight tasks over every prefix of the journal.
int max_concurrent_running(const std::vector<Event>& events);
// Digest over canonical event text with timestamps removed.
std::string journal_digest(const std::vector<Event>& events);
// summaries/task-<id>.json byte contents by task id.
std::map<int, std::string> summary_bytes(const Workspace& ws);
// Count of live child processes of this process.
int child_process_count();

RunConfig fast_config();

}  // namespace steward::testing
