#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steward/backend.hpp"
#include "steward/executor.hpp"
#include "steward/types.hpp"
#include "steward/workspace.hpp"

namespace steward {

struct TaskBrief {
  TaskSpec task;
  std::vector<TaskSummary> dependency_summaries;
  std::string task_dir;    // workspace-relative
  std::string shared_dir;  // workspace-relative
  std::optional<std::string> revise_feedback;

  friend bool operator==(const TaskBrief&, const TaskBrief&) = default;
};

// Reads the summaries of task.dependencies; nothing else from other tasks.
TaskBrief assemble_brief(const TaskSpec& task, const Plan& plan, const Workspace& workspace,
                         std::optional<std::string> revise_feedback = std::nullopt);

// The first user message of a worker conversation.
std::string render_brief(const TaskBrief& brief);

struct ToolCallRecord {
  std::string name;
  std::string call_id;
  std::string arguments;
  std::string outcome_digest;  // SHA-256 of the observation text
  bool failure = false;
};

struct StepRecord {
  int step_no = 0;
  std::string request_digest;
  std::vector<ToolCallRecord> calls;
  bool local_failure = false;
  bool nudged = false;  // the model answered without a tool call
  std::string digest;   // covers request digest, calls and outcome digests
};

enum class Terminal { kCompleted, kBudgetExhausted, kToolFatal, kCancelled };
std::string_view to_string(Terminal t);

struct TaskResult {
  TaskId task_id;
  int attempt = 0;
  std::vector<StepRecord> steps;
  Terminal terminal = Terminal::kBudgetExhausted;
  std::optional<TaskSummary> draft_summary;  // set iff completed
  std::string detail;
};

// ---------------------------------------------------------------------------
// Context compaction

struct Transcript {
  ChatMessage brief;
  std::optional<ChatMessage> digest_block;  // replaces steps before first_step
  int first_step = 1;                        // step number of steps.front()
  std::vector<std::vector<ChatMessage>> steps;

  std::vector<ChatMessage> flatten() const;
};

std::size_t transcript_bytes(const Transcript& t);

// Keeps the brief and the most recent keep_recent steps verbatim and folds
// older steps into one digest message. Identity when already under budget.
// Throws kConfig when the brief alone does not fit.
Transcript compact_context(const Transcript& transcript, std::size_t budget, int keep_recent);

// ---------------------------------------------------------------------------
// Tools

struct ToolContext {
  TaskId task;
  int attempt = 0;
  int step_no = 0;
  std::string owner;
};

struct ToolObservation {
  std::string content;
  bool failure = false;
  bool fatal = false;  // ends the attempt as tool_fatal
};

class ToolHost {
 public:
  virtual ~ToolHost() = default;
  virtual std::vector<ToolSchema> tools() const = 0;
  virtual ToolObservation execute(const ToolCall& call, const ToolContext& context) = 0;
};

// run_command, read_file, write_file, spawn_job, poll_job, kill_job, wait_job.
class ExecutorToolHost final : public ToolHost {
 public:
  explicit ExecutorToolHost(Executor& executor) : executor_(executor) {}
  std::vector<ToolSchema> tools() const override;
  ToolObservation execute(const ToolCall& call, const ToolContext& context) override;

 private:
  Executor& executor_;
};

// The "subtask" tool: each call is one simulated step drawn with simulate_step.
// Observations read "subtask <k> try <j>: ok|fail".
class SimulatedToolHost final : public ToolHost {
 public:
  explicit SimulatedToolHost(StochasticProfile profile) : profile_(profile) {}
  std::vector<ToolSchema> tools() const override;
  ToolObservation execute(const ToolCall& call, const ToolContext& context) override;
  std::uint64_t draws() const { return draws_; }

 private:
  StochasticProfile profile_;
  std::uint64_t draws_ = 0;
  std::map<int, int> tries_;
};

ToolSchema task_complete_schema();

// ---------------------------------------------------------------------------
// Step loop

class WorkerObserver {
 public:
  virtual ~WorkerObserver() = default;
  // Called once per step, after its tools ran and before the next backend
  // call. Implementations make the step durable before returning.
  virtual void on_step(const TaskResult& so_far, const StepRecord& step,
                       const std::vector<ChatMessage>& messages) = 0;
  virtual void on_compaction(int before_step, int digested_steps) {
    (void)before_step;
    (void)digested_steps;
  }
  virtual bool cancelled() const { return false; }
};

struct WorkerOptions {
  int attempt = 1;
  std::string owner;                                   // executor cancellation tag
  const Workspace* workspace = nullptr;                // enables artifact checks
  std::optional<std::filesystem::path> transcript_path;  // JSONL, one line per message
  WorkerObserver* observer = nullptr;
  std::string system_prompt;  // defaults to the bundled worker prompt
};

TaskResult run_task(const TaskBrief& brief, Backend& backend, ToolHost& tools,
                    const RunConfig& config, const WorkerOptions& options);

}  // namespace steward
