#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "steward/fault.hpp"
#include "steward/path_jail.hpp"
#include "steward/types.hpp"

namespace steward {

// Fixed directory names under the workspace root.
struct WorkspaceLayout {
  std::filesystem::path root;
  std::filesystem::path tasks;      // tasks/<id>/ per-task scratch
  std::filesystem::path shared;     // cross-task artifacts
  std::filesystem::path summaries;  // summaries/task-<id>.json
  std::filesystem::path journal;    // journal/events.jsonl
  std::filesystem::path plan;       // plan/version-<n>.json, plan/project.json
  std::filesystem::path archive;    // invalidated attempts

  static WorkspaceLayout under(const std::filesystem::path& root);
};

struct ArtifactRecord {
  std::string path;  // workspace-relative
  TaskId producer;
  std::string description;
  std::uint64_t byte_length = 0;
  std::string content_digest;

  friend bool operator==(const ArtifactRecord&, const ArtifactRecord&) = default;
};

class Workspace {
 public:
  // Creates the layout. Refuses a root that already holds a journal
  // ("workspace exists; use resume") or any other content.
  static Workspace init(const std::filesystem::path& root);
  static Workspace open(const std::filesystem::path& root);

  const WorkspaceLayout& layout() const { return layout_; }
  const std::filesystem::path& root() const { return layout_.root; }
  const PathJail& jail() const { return jail_; }
  std::filesystem::path resolve(std::string_view relative) const { return jail_.resolve(relative); }
  std::filesystem::path journal_path() const { return layout_.journal / "events.jsonl"; }

  std::filesystem::path task_dir(TaskId id) const;
  std::filesystem::path ensure_task_dir(TaskId id) const;
  std::string task_dir_relative(TaskId id) const;

  std::filesystem::path save_plan(const Plan& plan) const;
  Plan load_plan(int version) const;
  std::vector<int> plan_versions() const;
  void save_project(const ProjectSpec& spec) const;
  ProjectSpec load_project() const;

  std::filesystem::path summary_path(TaskId id) const;
  // Verifies every artifact_index path, writes atomically, verifies again
  // before publishing. Throws kNotFound listing missing paths ("missing: a, b").
  std::filesystem::path write_summary(const TaskSummary& summary, std::size_t cap) const;
  std::optional<TaskSummary> read_summary(TaskId id) const;
  std::optional<std::string> read_summary_bytes(TaskId id) const;
  // Summaries of task.dependencies ordered by id. kIntegrity if one is absent.
  std::vector<TaskSummary> read_dependency_summaries(const TaskSpec& task) const;

  // Moves tasks/<id> to archive/<id>.attempt-<n> and recreates an empty
  // tasks/<id>. nullopt when there is nothing to archive.
  std::optional<std::filesystem::path> archive_attempt(TaskId id, int attempt) const;
  std::optional<std::filesystem::path> archive_summary(TaskId id, int attempt) const;
  // Moves shared artifacts into archive/retracted/; returns the paths moved.
  std::vector<std::string> retract_shared(const std::vector<std::string>& paths,
                                          std::uint64_t tag) const;

  std::vector<ArtifactRecord> register_artifacts(const TaskSummary& summary) const;
  // Registry of artifacts named by live summaries.
  std::vector<ArtifactRecord> artifacts() const;

  void set_fault_injector(FaultInjector* injector) { fault_ = injector; }
  void set_sync(bool sync) { sync_ = sync; }
  // Test hook run between the first artifact check and the rename.
  std::function<void()> after_artifact_check;

 private:
  explicit Workspace(const std::filesystem::path& root);

  std::filesystem::path unique_archive_path(const std::string& base) const;

  WorkspaceLayout layout_;
  PathJail jail_;
  FaultInjector* fault_ = nullptr;
  bool sync_ = true;
};

// Creates the workspace and persists plan version 1 under plan/.
WorkspaceLayout init_workspace(const std::filesystem::path& root, const Plan& plan);

std::string missing_artifacts_message(const std::vector<std::string>& missing);

}  // namespace steward
