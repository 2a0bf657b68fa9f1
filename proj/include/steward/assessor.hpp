#pragma once

#include <optional>
#include <string>
#include <vector>

#include "steward/backend.hpp"
#include "steward/state.hpp"
#include "steward/types.hpp"
#include "steward/worker.hpp"
#include "steward/workspace.hpp"

namespace steward {

struct ListedFile {
  std::string path;  // workspace-relative
  std::uint64_t bytes = 0;
};

struct EvidenceExcerpt {
  std::string source;  // workspace-relative path
  std::string text;
};

struct AssessmentInput {
  std::string goal;
  std::vector<TaskSpec> plan_context;  // all tasks: ids, titles, criteria
  TaskSpec task;
  int attempt = 0;
  std::string terminal;  // completed | budget_exhausted | tool_fatal
  std::string terminal_detail;
  std::optional<TaskSummary> draft_summary;
  std::vector<ListedFile> artifact_listing;
  std::vector<EvidenceExcerpt> evidence;
  std::vector<TaskSummary> accepted_summaries;
};

// Evidence: tails of the newest step and job logs, then files named in the
// success criteria or expected artifacts, all under config.evidence_cap.
// Worker transcripts are listed by name only, never read.
AssessmentInput build_assessment_input(const Plan& plan, const TaskSpec& task,
                                       const TaskResult& result, const Workspace& workspace,
                                       const std::vector<TaskSummary>& accepted_summaries,
                                       const RunConfig& config);

std::string render_assessment(const AssessmentInput& input);

// Writes tasks/<id>/assessment.attempt-<n>.json describing what the judge saw.
void write_assessment_manifest(const Workspace& workspace, const AssessmentInput& input);

struct VerdictContext {
  TaskIdSet plan_ids;
  std::optional<TaskId> under_assessment;
  std::optional<TaskSummary> draft_summary;
  bool budget_exhausted = false;  // Accept is not allowed
  bool project_scope = false;     // Revise is not allowed
};

struct ParseOutcome {
  std::optional<Verdict> verdict;
  std::vector<std::string> violations;

  bool ok() const { return verdict.has_value(); }
};

ToolSchema issue_verdict_schema();

// Total: never throws on model output.
ParseOutcome parse_verdict(const ChatResponse& response, const VerdictContext& context);

struct AssessmentResult {
  Verdict verdict;
  int exchanges = 0;
  bool unparseable = false;  // reprompts ran out; verdict is the escalation Halt
};

inline constexpr std::string_view kUnparseableReason = "assessor output unparseable";

AssessmentResult assess_task(const AssessmentInput& input, const Plan& plan, Backend& backend,
                             const RunConfig& config);

struct ProjectAssessmentInput {
  const Plan* plan = nullptr;
  const ProjectState* state = nullptr;
  std::vector<TaskSummary> accepted_summaries;
  TaskId trigger;                    // the task that exhausted its retries
  std::vector<std::string> feedback;  // Revise feedback it received
  int attempt = 0;
};

// Accept means "continue"; Revise is rejected as a parse failure.
AssessmentResult assess_project(const ProjectAssessmentInput& input, Backend& backend,
                                const RunConfig& config);

// Optional check before dispatching a task flagged expensive.
AssessmentResult assess_preflight(const Plan& plan, const TaskSpec& task,
                                  const std::vector<TaskSummary>& accepted_summaries,
                                  Backend& backend, const RunConfig& config);

}  // namespace steward
