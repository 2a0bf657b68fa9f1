#include "steward/assessor.hpp"

#include <algorithm>
#include <regex>

#include "steward/error.hpp"
#include "steward/path_jail.hpp"
#include "steward/prompt_assets.hpp"
#include "steward/serialize.hpp"

namespace steward {
namespace fs = std::filesystem;

namespace {

bool is_transcript(const std::string& name) {
  return name.starts_with("transcript.") && name.ends_with(".jsonl");
}

std::string tail_of(const std::string& bytes, std::size_t cap) {
  if (bytes.size() <= cap) return bytes;
  return "[...]\n" + bytes.substr(bytes.size() - cap);
}

// Numeric order for step-<n>.log so step-10 sorts after step-9.
int log_rank(const fs::path& p) {
  static const std::regex kStep(R"(step-(\d+)\.log)");
  std::smatch m;
  const std::string name = p.filename().string();
  return std::regex_match(name, m, kStep) ? std::stoi(m[1]) : 0;
}

// Workspace-relative paths mentioned in free text that name existing files.
std::vector<std::string> mentioned_paths(const std::string& text, const Workspace& ws) {
  static const std::regex kPath(R"(([A-Za-z0-9_.\-]+/)*[A-Za-z0-9_\-]+\.[A-Za-z0-9]+)");
  std::vector<std::string> out;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), kPath); it != std::sregex_iterator();
       ++it) {
    const std::string candidate = it->str();
    try {
      std::error_code ec;
      if (fs::is_regular_file(ws.resolve(candidate), ec)) out.push_back(candidate);
    } catch (const Error&) {
    }
  }
  return out;
}

}  // namespace

AssessmentInput build_assessment_input(const Plan& plan, const TaskSpec& task,
                                       const TaskResult& result, const Workspace& workspace,
                                       const std::vector<TaskSummary>& accepted_summaries,
                                       const RunConfig& config) {
  AssessmentInput in;
  in.goal = plan.goal;
  in.plan_context = plan.tasks;
  in.task = task;
  in.attempt = result.attempt;
  in.terminal = std::string(to_string(result.terminal));
  in.terminal_detail = result.detail;
  in.draft_summary = result.draft_summary;
  in.accepted_summaries = accepted_summaries;

  const fs::path dir = workspace.task_dir(task.task_id);
  std::vector<fs::path> logs;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      in.artifact_listing.push_back({workspace.jail().relative(f), fs::file_size(f, ec)});
      const std::string parent = f.parent_path().filename().string();
      if ((parent == "logs" || parent == "jobs") && f.extension() == ".log") logs.push_back(f);
    }
  }
  // Shared artifacts this task claims or is expected to produce.
  std::vector<std::string> shared;
  if (result.draft_summary) {
    for (const auto& a : result.draft_summary->artifact_index) shared.push_back(a.path);
  }
  shared.insert(shared.end(), task.expected_artifacts.begin(), task.expected_artifacts.end());
  std::sort(shared.begin(), shared.end());
  shared.erase(std::unique(shared.begin(), shared.end()), shared.end());
  for (const auto& rel : shared) {
    if (!rel.starts_with("shared/")) continue;
    try {
      const fs::path p = workspace.resolve(rel);
      if (fs::is_regular_file(p, ec)) in.artifact_listing.push_back({rel, fs::file_size(p, ec)});
    } catch (const Error&) {
    }
  }

  std::size_t budget = config.evidence_cap;
  const std::size_t per_item = std::max<std::size_t>(512, config.evidence_cap / 8);
  auto add_evidence = [&](const std::string& source, const std::string& bytes) {
    if (budget == 0) return;
    for (const auto& e : in.evidence) {
      if (e.source == source) return;
    }
    std::string text = tail_of(bytes, std::min(per_item, budget));
    budget -= std::min(budget, text.size());
    in.evidence.push_back({source, std::move(text)});
  };

  // Newest logs first: job logs, then step logs by descending step number.
  std::stable_sort(logs.begin(), logs.end(), [](const fs::path& a, const fs::path& b) {
    const bool ja = a.parent_path().filename() == "jobs";
    const bool jb = b.parent_path().filename() == "jobs";
    if (ja != jb) return ja;
    return log_rank(a) > log_rank(b);
  });
  const std::size_t max_logs = 4;
  for (std::size_t i = 0; i < logs.size() && i < max_logs; ++i) {
    add_evidence(workspace.jail().relative(logs[i]), read_file_bytes(logs[i]));
  }
  std::vector<std::string> named;
  for (const auto& c : task.success_criteria) {
    for (auto& p : mentioned_paths(c, workspace)) named.push_back(std::move(p));
  }
  named.insert(named.end(), task.expected_artifacts.begin(), task.expected_artifacts.end());
  for (const auto& rel : named) {
    const std::string name = fs::path(rel).filename().string();
    if (is_transcript(name) || name.starts_with("assessment.attempt-")) continue;
    try {
      const fs::path p = workspace.resolve(rel);
      if (fs::is_regular_file(p, ec)) add_evidence(rel, read_file_bytes(p));
    } catch (const Error&) {
    }
  }
  return in;
}

std::string render_assessment(const AssessmentInput& in) {
  std::string out = "Project goal:\n" + in.goal + "\n\nPlan:\n";
  for (const auto& t : in.plan_context) {
    out += "- task " + to_string(t.task_id) + ": " + t.title + "\n";
  }
  const TaskSpec& t = in.task;
  out += "\nTask under review: " + to_string(t.task_id) + " (" + t.title + "), attempt " +
         std::to_string(in.attempt) + "\nObjective:\n" + t.objective + "\nSuccess criteria:\n";
  for (const auto& c : t.success_criteria) out += "- " + c + "\n";
  if (!t.expected_artifacts.empty()) {
    out += "Expected artifacts:\n";
    for (const auto& a : t.expected_artifacts) out += "- " + a + "\n";
  }
  out += "\nAttempt ended: " + in.terminal;
  if (!in.terminal_detail.empty()) out += " (" + in.terminal_detail + ")";
  out += "\n\nDraft summary:\n";
  out += in.draft_summary ? json(*in.draft_summary).dump(2) : std::string("none");
  out += "\n\nFiles:\n";
  for (const auto& f : in.artifact_listing) {
    out += "- " + f.path + " (" + std::to_string(f.bytes) + " bytes)\n";
  }
  out += "\nEvidence:\n";
  for (const auto& e : in.evidence) out += "--- " + e.source + "\n" + e.text + "\n";
  out += "\nAccepted summaries:\n";
  for (const auto& s : in.accepted_summaries) out += json(s).dump() + "\n";
  return out;
}

void write_assessment_manifest(const Workspace& workspace, const AssessmentInput& in) {
  json listing = json::array();
  for (const auto& f : in.artifact_listing) listing.push_back({{"path", f.path}, {"bytes", f.bytes}});
  json evidence = json::array();
  for (const auto& e : in.evidence) evidence.push_back({{"source", e.source}, {"bytes", e.text.size()}});
  json accepted = json::array();
  for (const auto& s : in.accepted_summaries) accepted.push_back(s.task_id.value);
  json manifest{{"task_id", in.task.task_id.value},
                {"attempt", in.attempt},
                {"terminal", in.terminal},
                {"artifact_listing", listing},
                {"evidence", evidence},
                {"accepted_summaries", accepted}};
  const fs::path dir = workspace.ensure_task_dir(in.task.task_id);
  write_file_atomic(dir / ("assessment.attempt-" + std::to_string(in.attempt) + ".json"),
                    manifest.dump(2) + "\n", nullptr, false);
}

// ---------------------------------------------------------------------------

ToolSchema issue_verdict_schema() {
  json props{{"kind", {{"type", "string"}, {"enum", {"accept", "revise", "redo_from", "halt"}}}},
             {"summary", {{"type", "object"}}},
             {"feedback", {{"type", "string"}}},
             {"severity", {{"type", "string"}, {"enum", {"minor", "major"}}}},
             {"target", {{"type", "integer"}}},
             {"reason", {{"type", "string"}}}};
  return ToolSchema{"issue_verdict", "Record the review decision.",
                    json{{"type", "object"}, {"properties", props}, {"required", {"kind"}}}};
}

ParseOutcome parse_verdict(const ChatResponse& response, const VerdictContext& ctx) {
  ParseOutcome out;
  std::vector<const ToolCall*> calls;
  for (const auto& c : response.tool_calls) {
    if (c.name == "issue_verdict") calls.push_back(&c);
  }
  if (calls.empty()) {
    out.violations.push_back("no issue_verdict call");
    return out;
  }
  if (calls.size() > 1) {
    out.violations.push_back("more than one issue_verdict call");
    return out;
  }
  json args;
  try {
    args = json::parse(calls.front()->arguments);
  } catch (const json::exception&) {
    out.violations.push_back("arguments are not valid JSON");
    return out;
  }
  if (!args.is_object()) {
    out.violations.push_back("arguments must be an object");
    return out;
  }
  auto text = [&](const char* key) -> std::string {
    auto it = args.find(key);
    return it != args.end() && it->is_string() ? it->get<std::string>() : std::string{};
  };
  const std::string kind = text("kind");

  if (kind == "accept") {
    if (ctx.budget_exhausted) {
      out.violations.push_back("an attempt that exhausted its step budget cannot be accepted");
      return out;
    }
    TaskSummary summary;
    if (args.contains("summary") && args["summary"].is_object()) {
      try {
        summary = args["summary"].get<TaskSummary>();
      } catch (const json::exception&) {
        out.violations.push_back("summary is malformed");
        return out;
      }
    } else if (ctx.draft_summary) {
      summary = *ctx.draft_summary;
    } else if (!ctx.project_scope) {
      out.violations.push_back("summary required");
      return out;
    }
    if (ctx.under_assessment) summary.task_id = *ctx.under_assessment;
    out.verdict = verdict::Accept{std::move(summary)};
  } else if (kind == "revise") {
    if (ctx.project_scope) {
      out.violations.push_back("revise is not valid for a project assessment");
      return out;
    }
    const std::string feedback = text("feedback");
    if (feedback.empty()) out.violations.push_back("feedback required");
    Severity severity = Severity::kMinor;
    const std::string sev = text("severity");
    if (sev == "major") {
      severity = Severity::kMajor;
    } else if (!sev.empty() && sev != "minor") {
      out.violations.push_back("severity must be minor or major");
    }
    if (out.violations.empty()) out.verdict = verdict::Revise{feedback, severity};
  } else if (kind == "redo_from") {
    auto it = args.find("target");
    if (it == args.end() || !it->is_number_integer()) {
      out.violations.push_back("target required");
      return out;
    }
    const TaskId target(it->get<int>());
    const bool known = ctx.plan_ids.count(target) > 0;
    const bool not_later = !ctx.under_assessment || target <= *ctx.under_assessment;
    if (!known || !not_later) {
      out.violations.push_back("target out of range");
      return out;
    }
    out.verdict = verdict::RedoFrom{target, text("reason")};
  } else if (kind == "halt") {
    const std::string reason = text("reason");
    if (reason.empty()) {
      out.violations.push_back("reason required");
      return out;
    }
    out.verdict = verdict::Halt{reason};
  } else {
    out.violations.push_back(kind.empty() ? "kind required" : "unknown variant: " + kind);
  }
  return out;
}

namespace {

AssessmentResult converse(ChatRequest request, const VerdictContext& ctx, Backend& backend,
                          const RunConfig& config) {
  AssessmentResult result{verdict::Halt{std::string(kUnparseableReason)}, 0, true};
  const int tries = 1 + std::max(0, config.assess_reprompt_limit);
  for (int i = 1; i <= tries; ++i) {
    request.meta.step = i;
    seal(request);
    ChatResponse response;
    std::vector<std::string> violations;
    ++result.exchanges;
    try {
      response = backend.complete(request);
      validate_response(request, response);
      ParseOutcome parsed = parse_verdict(response, ctx);
      if (parsed.ok()) {
        result.verdict = std::move(*parsed.verdict);
        result.unparseable = false;
        return result;
      }
      violations = std::move(parsed.violations);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSchema) throw;
      violations.push_back(e.what());
    }
    request.messages.push_back(
        ChatMessage{Speaker::kAssistant, response.assistant_text, std::nullopt, response.tool_calls});
    std::string note = "The verdict could not be used:";
    for (const auto& v : violations) note += "\n- " + v;
    note += "\nCall issue_verdict exactly once with valid arguments.";
    request.messages.push_back(ChatMessage{Speaker::kUser, note, {}, {}});
  }
  return result;
}

ChatRequest base_request(std::string_view system, std::string scope, std::optional<TaskId> task,
                         int attempt, std::string content) {
  ChatRequest r;
  r.role = Role::kAssessor;
  r.system = std::string(system);
  r.tools = {issue_verdict_schema()};
  r.meta.scope = std::move(scope);
  r.meta.task_id = task;
  if (attempt > 0) r.meta.attempt = attempt;
  r.messages.push_back(ChatMessage{Speaker::kUser, std::move(content), {}, {}});
  return r;
}

}  // namespace

AssessmentResult assess_task(const AssessmentInput& input, const Plan& plan, Backend& backend,
                             const RunConfig& config) {
  VerdictContext ctx;
  ctx.plan_ids = plan.task_ids();
  ctx.under_assessment = input.task.task_id;
  ctx.draft_summary = input.draft_summary;
  ctx.budget_exhausted = input.terminal != "completed";
  return converse(base_request(prompts::k_assessor, "task", input.task.task_id, input.attempt,
                               render_assessment(input)),
                  ctx, backend, config);
}

AssessmentResult assess_project(const ProjectAssessmentInput& input, Backend& backend,
                                const RunConfig& config) {
  const Plan& plan = *input.plan;
  std::string text = "Project goal:\n" + plan.goal + "\n\nTask states:\n";
  for (const auto& t : plan.tasks) {
    auto it = input.state->tasks.find(t.task_id);
    text += "- task " + to_string(t.task_id) + " (" + t.title + "): " +
            (it == input.state->tasks.end() ? std::string("unknown") : describe(it->second.state)) +
            "\n";
  }
  const TaskSpec* trigger = plan.find(input.trigger);
  text += "\nTask " + to_string(input.trigger) + " could not meet its criteria within the retry budget.\n";
  if (trigger) {
    text += "Objective:\n" + trigger->objective + "\nSuccess criteria:\n";
    for (const auto& c : trigger->success_criteria) text += "- " + c + "\n";
  }
  text += "Feedback it received:\n";
  for (const auto& f : input.feedback) text += "- " + f + "\n";
  text += "\nAccepted summaries:\n";
  for (const auto& s : input.accepted_summaries) text += json(s).dump() + "\n";

  VerdictContext ctx;
  ctx.plan_ids = plan.task_ids();
  ctx.under_assessment = input.trigger;
  ctx.project_scope = true;
  return converse(base_request(prompts::k_project_assessor, "project", input.trigger, input.attempt,
                               std::move(text)),
                  ctx, backend, config);
}

AssessmentResult assess_preflight(const Plan& plan, const TaskSpec& task,
                                  const std::vector<TaskSummary>& accepted_summaries,
                                  Backend& backend, const RunConfig& config) {
  std::string text = "Before execution: review whether task " + to_string(task.task_id) + " (" +
                     task.title + ") is ready to run.\n\nObjective:\n" + task.objective +
                     "\nSuccess criteria:\n";
  for (const auto& c : task.success_criteria) text += "- " + c + "\n";
  text += "\nSummaries of its dependencies:\n";
  for (const auto& s : accepted_summaries) {
    if (task.dependencies.count(s.task_id)) text += json(s).dump() + "\n";
  }
  VerdictContext ctx;
  ctx.plan_ids = plan.task_ids();
  ctx.under_assessment = task.task_id;
  ctx.project_scope = false;
  ctx.draft_summary = TaskSummary{task.task_id, "pre-flight check", {}, "", "", {}};
  return converse(base_request(prompts::k_assessor, "preflight", task.task_id, 0, std::move(text)),
                  ctx, backend, config);
}

}  // namespace steward
