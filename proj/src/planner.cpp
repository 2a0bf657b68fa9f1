#include "steward/planner.hpp"

#include <istream>
#include <ostream>
#include <thread>

#include "steward/error.hpp"
#include "steward/prompt_assets.hpp"
#include "steward/serialize.hpp"

namespace steward {

std::optional<std::string> UnattendedChannel::ask(const std::string&) {
  if (wait_.count() > 0) std::this_thread::sleep_for(wait_);
  return std::string(kAnswer);
}

std::optional<std::string> ScriptedChannel::ask(const std::string& question) {
  asked_.push_back(question);
  if (next_ >= answers_.size()) return std::nullopt;
  return answers_[next_++];
}

AnswerFileChannel::AnswerFileChannel(const json& doc) {
  if (doc.contains("answers")) ordered_ = doc.at("answers").get<std::vector<std::string>>();
  if (doc.contains("questions")) {
    by_question_ = doc.at("questions").get<std::map<std::string, std::string>>();
  }
  if (doc.contains("default")) fallback_ = doc.at("default").get<std::string>();
}

std::optional<std::string> AnswerFileChannel::ask(const std::string& question) {
  if (auto it = by_question_.find(question); it != by_question_.end()) return it->second;
  if (next_ < ordered_.size()) return ordered_[next_++];
  return fallback_;
}

std::optional<std::string> StreamChannel::ask(const std::string& question) {
  out_ << "planner asks: " << question << "\n> " << std::flush;
  std::string line;
  if (!std::getline(in_, line) || line.empty()) return std::nullopt;
  return line;
}

ToolSchema propose_plan_schema() {
  json task{{"type", "object"},
            {"properties",
             {{"task_id", {{"type", "integer"}}},
              {"title", {{"type", "string"}}},
              {"objective", {{"type", "string"}}},
              {"success_criteria", {{"type", "array"}, {"items", {{"type", "string"}}}}},
              {"dependencies", {{"type", "array"}, {"items", {{"type", "integer"}}}}},
              {"expected_artifacts", {{"type", "array"}, {"items", {{"type", "string"}}}}},
              {"hints", {{"type", "string"}}},
              {"expensive", {{"type", "boolean"}}}}},
            {"required", {"task_id", "title", "objective", "success_criteria"}}};
  return ToolSchema{"propose_plan", "Submit the complete plan.",
                    json{{"type", "object"},
                         {"properties",
                          {{"goal", {{"type", "string"}}},
                           {"tasks", {{"type", "array"}, {"items", task}}}}},
                         {"required", {"goal", "tasks"}}}};
}

ToolSchema ask_user_schema() {
  return ToolSchema{"ask_user", "Ask the user one clarifying question.",
                    json{{"type", "object"},
                         {"properties", {{"question", {{"type", "string"}}}}},
                         {"required", {"question"}}}};
}

namespace {

using Validator = std::function<ValidationReport(const Plan&)>;

struct ConversationOutcome {
  std::variant<Plan, Abandoned> outcome;
};

// Shared loop for initial planning and resume revisions.
std::variant<Plan, Abandoned> converse(ChatRequest request, Backend& backend,
                                       InteractionChannel* channel, const RunConfig& config,
                                       int max_questions, const Validator& validate,
                                       PlanningSession* session) {
  int reprompts = 0;
  int questions = 0;
  ValidationReport last;
  std::string last_problem;
  for (int step = 1;; ++step) {
    request.meta.step = step;
    seal(request);
    ChatResponse response;
    try {
      response = backend.complete(request);
      validate_response(request, response);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSchema) throw;
      response = ChatResponse{};
      last_problem = e.what();
    }
    if (session) {
      session->exchanges.push_back(
          json{{"request_digest", request.request_digest}, {"response", response}});
    }
    request.messages.push_back(
        ChatMessage{Speaker::kAssistant, response.assistant_text, std::nullopt, response.tool_calls});

    const ToolCall* proposal = nullptr;
    std::string problem;
    for (const auto& call : response.tool_calls) {
      if (call.name == "propose_plan" && proposal == nullptr) proposal = &call;
    }
    if (proposal == nullptr) {
      // Questions are answered through the channel and do not count as reprompts
      // until the question allowance runs out.
      bool asked = false;
      for (const auto& call : response.tool_calls) {
        if (call.name != "ask_user") continue;
        std::string question;
        try {
          question = json::parse(call.arguments).at("question").get<std::string>();
        } catch (const json::exception&) {
          question.clear();
        }
        std::string answer;
        if (question.empty()) {
          answer = "The question was empty.";
        } else if (channel == nullptr || questions >= max_questions) {
          answer = "No further questions can be answered; propose the plan.";
          ++reprompts;
        } else {
          ++questions;
          auto reply = channel->ask(question);
          if (!reply) return Abandoned{"user abandoned planning at: " + question};
          if (session) session->questions_asked.emplace_back(question, *reply);
          answer = *reply;
        }
        request.messages.push_back(ChatMessage{Speaker::kTool, answer, call.call_id, {}});
        asked = true;
      }
      if (asked) {
        if (reprompts > config.assess_reprompt_limit) break;
        continue;
      }
      problem = last_problem.empty() ? "no propose_plan call; prose alone is not accepted"
                                     : last_problem;
      last_problem.clear();
    } else {
      try {
        Plan plan = json::parse(proposal->arguments).get<Plan>();
        last = validate(plan);
        if (last.empty()) return plan;
        problem = "the plan has violations:\n" + render(last);
      } catch (const json::exception& e) {
        problem = std::string("the plan document is malformed: ") + e.what();
      } catch (const Error& e) {
        problem = std::string("the plan document is malformed: ") + e.what();
      }
      request.messages.push_back(ChatMessage{Speaker::kTool, problem, proposal->call_id, {}});
    }
    if (++reprompts > config.assess_reprompt_limit) {
      throw Error(ErrorCode::kPlanningFailed,
                  "planning failed after " + std::to_string(reprompts - 1) + " reprompts: " +
                      (last.empty() ? problem : render(last)));
    }
    request.messages.push_back(
        ChatMessage{Speaker::kUser, "Please fix this and call propose_plan again: " + problem, {}, {}});
  }
  throw Error(ErrorCode::kPlanningFailed, "planning failed: too many unanswerable questions");
}

}  // namespace

PlanningSession plan_project(const ProjectSpec& spec, Backend& backend,
                             InteractionChannel& channel, const RunConfig& config,
                             const PlanningOptions& options) {
  if (auto problems = validate_project_spec(spec); !problems.empty()) {
    std::string text;
    for (const auto& p : problems) text += (text.empty() ? "" : "; ") + p;
    throw Error(ErrorCode::kInvalidArgument, "invalid project spec: " + text);
  }
  PlanningSession session;
  session.spec = spec;

  ChatRequest request;
  request.role = Role::kPlanner;
  request.system = std::string(prompts::k_planner);
  request.tools = {propose_plan_schema(), ask_user_schema()};
  request.meta.scope = "plan";
  request.meta.attempt = options.version;
  std::string brief = "Project brief:\n" + spec.instruction + "\n";
  if (!spec.attachments.empty()) {
    brief += "\nAttached files:\n";
    for (const auto& a : spec.attachments) {
      brief += "- " + a.path + " (" + std::to_string(a.byte_length) + " bytes)\n";
    }
  }
  if (options.rejection_comment) {
    brief += "\nA previous plan was rejected with this comment:\n" + *options.rejection_comment + "\n";
  }
  request.messages.push_back(ChatMessage{Speaker::kUser, brief, {}, {}});

  session.outcome = converse(std::move(request), backend, &channel, config, options.max_questions,
                             validate_plan, &session);
  if (auto* plan = std::get_if<Plan>(&session.outcome)) plan->version = options.version;
  return session;
}

ApprovalOutcome approve_plan(const ProjectState& state, int version, Decision decision,
                             const std::string& actor, const std::string& comment) {
  if (state.approved_version == version && !(state.proposed && state.proposed->version == version)) {
    return {std::nullopt, "plan version " + std::to_string(version) + " is already approved"};
  }
  if (!state.proposed || state.proposed->version != version) {
    throw Error(ErrorCode::kFailedPrecondition,
                "plan version " + std::to_string(version) + " is not awaiting approval");
  }
  if (decision == Decision::kApprove) return {event::PlanApproved{version, actor}, {}};
  return {event::PlanRejected{version, comment, actor}, {}};
}

ValidationReport validate_revision(const Plan& old_plan, const Plan& new_plan,
                                   const TaskIdSet& accepted) {
  ValidationReport report;
  for (TaskId id : accepted) {
    const TaskSpec* before = old_plan.find(id);
    const TaskSpec* after = new_plan.find(id);
    if (before == nullptr) continue;
    if (after == nullptr) {
      report.push_back({id, "accepted-task-changed",
                        "accepted task " + to_string(id) + " was removed"});
    } else if (!(*before == *after)) {
      report.push_back({id, "accepted-task-changed",
                        "accepted task " + to_string(id) + " was modified"});
    }
  }
  std::sort(report.begin(), report.end());
  return report;
}

Plan revise_plan_for_resume(const ProjectState& state, const std::string& instruction,
                            Backend& backend, const RunConfig& config) {
  if (!state.halt) throw Error(ErrorCode::kFailedPrecondition, "project is not halted");
  if (!state.plan) throw Error(ErrorCode::kFailedPrecondition, "project has no approved plan");
  const Plan& current = *state.plan;
  const int next_version = std::max(state.latest_version, current.version) + 1;
  if (instruction.empty()) {
    Plan same = current;
    same.version = next_version;
    return same;
  }
  TaskIdSet accepted;
  for (const auto& [id, rec] : state.tasks) {
    if (rec.state.is(TaskState::Kind::kAccepted)) accepted.insert(id);
  }

  ChatRequest request;
  request.role = Role::kPlanner;
  request.system = std::string(prompts::k_resume_planner);
  request.tools = {propose_plan_schema()};
  request.meta.scope = "resume";
  request.meta.attempt = next_version;
  std::string text = "Current plan:\n" + json(current).dump(2) + "\n\nHalt reason:\n" +
                     state.halt->reason + "\n\nHalt frontier:";
  for (TaskId id : state.halt->frontier) text += " " + to_string(id);
  text += "\n\nAccepted tasks (keep unchanged):";
  for (TaskId id : accepted) text += " " + to_string(id);
  text += "\n\nOperator instruction:\n" + instruction + "\n";
  request.messages.push_back(ChatMessage{Speaker::kUser, text, {}, {}});

  auto validator = [&](const Plan& p) {
    ValidationReport report = validate_plan(p);
    for (auto& v : validate_revision(current, p, accepted)) report.push_back(std::move(v));
    std::sort(report.begin(), report.end());
    return report;
  };
  auto outcome = converse(std::move(request), backend, nullptr, config, 0, validator, nullptr);
  Plan revised = std::get<Plan>(outcome);  // no channel, so never abandoned
  revised.version = next_version;
  return revised;
}

}  // namespace steward
