#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"
#include "steward/assessor.hpp"
#include "steward/error.hpp"

using namespace steward;
using namespace steward::testing;
namespace fs = std::filesystem;

namespace {

ChatResponse verdict_response(const json& args) {
  return response("", {call("issue_verdict", args, "v")}).get<ChatResponse>();
}

VerdictContext task_context(int tasks, int under) {
  VerdictContext ctx;
  for (int i = 1; i <= tasks; ++i) ctx.plan_ids.insert(TaskId(i));
  ctx.under_assessment = TaskId(under);
  ctx.draft_summary = TaskSummary{TaskId(under), "draft", {}, "", "", {}};
  return ctx;
}

std::vector<std::string> violations(const json& args, const VerdictContext& ctx) {
  ParseOutcome o = parse_verdict(verdict_response(args), ctx);
  EXPECT_FALSE(o.ok());
  return o.violations;
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v) {
    if (s.find(needle) != std::string::npos) return true;
  }
  return false;
}

TaskResult completed(int id, std::vector<std::string> artifacts = {}) {
  TaskResult r;
  r.task_id = TaskId(id);
  r.attempt = 1;
  r.terminal = Terminal::kCompleted;
  TaskSummary s{TaskId(id), "finished", {}, "", "", {}};
  for (auto& a : artifacts) s.artifact_index.push_back({a, "artifact"});
  r.draft_summary = s;
  return r;
}

}  // namespace

// ---- parsing ---------------------------------------------------------------

TEST(ParseVerdict, AcceptUsesTheDraftWhenNoSummaryIsGiven) {
  ParseOutcome o = parse_verdict(verdict_response({{"kind", "accept"}}), task_context(3, 2));
  ASSERT_TRUE(o.ok());
  const auto& a = std::get<verdict::Accept>(*o.verdict);
  EXPECT_EQ(a.final_summary.outcome, "draft");
  EXPECT_EQ(a.final_summary.task_id, TaskId(2));
}

TEST(ParseVerdict, AcceptSummaryIsPinnedToTheTaskUnderReview) {
  json summary{{"task_id", 9}, {"outcome", "rewritten"}, {"artifact_index", json::array()},
               {"usage_notes", ""}, {"data_formats", ""}, {"metrics", json::array()}};
  ParseOutcome o = parse_verdict(verdict_response({{"kind", "accept"}, {"summary", summary}}),
                                 task_context(3, 2));
  ASSERT_TRUE(o.ok());
  const auto& a = std::get<verdict::Accept>(*o.verdict);
  EXPECT_EQ(a.final_summary.outcome, "rewritten");
  EXPECT_EQ(a.final_summary.task_id, TaskId(2));
}

TEST(ParseVerdict, RejectsMalformedVerdicts) {
  const auto ctx = task_context(11, 11);
  EXPECT_TRUE(mentions(violations({{"kind", "redo_from"}, {"target", 99}}, ctx), "target out of range"));
  EXPECT_TRUE(mentions(violations({{"kind", "revise"}, {"feedback", ""}}, ctx), "feedback required"));
  EXPECT_TRUE(mentions(violations({{"kind", "halt"}}, ctx), "reason required"));
  EXPECT_TRUE(mentions(violations({{"kind", "shrug"}}, ctx), "unknown variant: shrug"));
  EXPECT_TRUE(mentions(violations({{"kind", "revise"}, {"feedback", "x"}, {"severity", "dire"}}, ctx),
                       "severity"));

  auto later = task_context(11, 4);
  EXPECT_TRUE(mentions(violations({{"kind", "redo_from"}, {"target", 7}}, later), "target out of range"));

  auto none = parse_verdict(response("looks fine", {}).get<ChatResponse>(), ctx);
  EXPECT_FALSE(none.ok());
  EXPECT_TRUE(mentions(none.violations, "no issue_verdict call"));
}

TEST(ParseVerdict, BudgetExhaustedAttemptCannotBeAccepted) {
  auto ctx = task_context(3, 1);
  ctx.budget_exhausted = true;
  EXPECT_TRUE(mentions(violations({{"kind", "accept"}}, ctx), "cannot be accepted"));
  ParseOutcome o = parse_verdict(verdict_response({{"kind", "revise"}, {"feedback", "finish it"}}), ctx);
  EXPECT_TRUE(o.ok());
}

TEST(ParseVerdict, ProjectScopeRefusesRevise) {
  auto ctx = task_context(5, 3);
  ctx.project_scope = true;
  ctx.draft_summary.reset();
  EXPECT_TRUE(mentions(violations({{"kind", "revise"}, {"feedback", "x"}}, ctx),
                       "revise is not valid for a project assessment"));
  EXPECT_TRUE(parse_verdict(verdict_response({{"kind", "accept"}}), ctx).ok());
}

TEST(ParseVerdict, NeverThrowsOnGarbage) {
  const auto ctx = task_context(3, 2);
  for (const std::string args : {"", "[]", "null", "{\"kind\":3}", "{\"kind\":\"redo_from\",\"target\":\"x\"}",
                                 "{{{{", "{\"kind\":\"accept\",\"summary\":{\"metrics\":7}}"}) {
    ChatResponse r;
    r.tool_calls.push_back(ToolCall{"issue_verdict", args, "v"});
    EXPECT_NO_THROW({
      auto o = parse_verdict(r, ctx);
      EXPECT_FALSE(o.ok()) << args;
    });
  }
}

// ---- task assessment -------------------------------------------------------

class AssessorTest : public ::testing::Test {
 protected:
  AssessorTest() : ws_(Workspace::init(dir_.path() / "ws")), plan_(polymer_fixture().plan) {
    config_ = fast_config();
  }

  AssessmentInput input_for(int id, const TaskResult& result) {
    ws_.ensure_task_dir(TaskId(id));
    return build_assessment_input(plan_, *plan_.find(TaskId(id)), result, ws_, {}, config_);
  }

  TempDir dir_;
  Workspace ws_;
  Plan plan_;
  RunConfig config_;
};

TEST_F(AssessorTest, AcceptCarriesTheSummary) {
  Script s;
  s.verdict(3, 1, {{"kind", "accept"}});
  ScriptedBackend backend(s.entries());
  auto r = assess_task(input_for(3, completed(3)), plan_, backend, config_);
  ASSERT_FALSE(r.unparseable);
  EXPECT_EQ(r.exchanges, 1);
  EXPECT_EQ(std::get<verdict::Accept>(r.verdict).final_summary.task_id, TaskId(3));
}

TEST_F(AssessorTest, ReviseNamesTheMissingPlot) {
  const TaskSpec& task = *plan_.find(TaskId(5));
  TaskSpec with_plot = task;
  with_plot.expected_artifacts = {"shared/plots/viscosity.png"};
  plan_.tasks[4] = with_plot;
  AssessmentInput in = input_for(5, completed(5));
  const std::string seen = render_assessment(in);
  EXPECT_NE(seen.find("shared/plots/viscosity.png"), std::string::npos);
  for (const auto& f : in.artifact_listing) EXPECT_NE(f.path, "shared/plots/viscosity.png");

  Script s;
  s.verdict(5, 1, {{"kind", "revise"}, {"feedback", "shared/plots/viscosity.png was not produced"}});
  ScriptedBackend backend(s.entries());
  auto r = assess_task(in, plan_, backend, config_);
  const auto& rev = std::get<verdict::Revise>(r.verdict);
  EXPECT_NE(rev.feedback.find("viscosity.png"), std::string::npos);
}

TEST_F(AssessorTest, RedoFromAnEarlierTask) {
  Script s;
  s.verdict(11, 1, {{"kind", "redo_from"}, {"target", 8}, {"reason", "fit used the wrong units"}});
  ScriptedBackend backend(s.entries());
  auto r = assess_task(input_for(11, completed(11)), plan_, backend, config_);
  const auto& redo = std::get<verdict::RedoFrom>(r.verdict);
  EXPECT_EQ(redo.target, TaskId(8));
  EXPECT_EQ(redo.reason, "fit used the wrong units");
}

TEST_F(AssessorTest, BadVerdictIsRepromptedWithTheViolation) {
  config_.assess_reprompt_limit = 2;
  Script s;
  s.raw({{"match", {{"role", "assessor"}, {"task_id", 2}, {"step", 1}}},
         {"response", response("", {call("issue_verdict", {{"kind", "redo_from"}, {"target", 99}}, "v")})}});
  s.raw({{"match", {{"role", "assessor"}, {"task_id", 2}, {"step", 2}}},
         {"response", response("", {call("issue_verdict", {{"kind", "accept"}}, "v")})}});
  ScriptedBackend inner(s.entries());
  CapturingBackend backend(inner);
  auto r = assess_task(input_for(2, completed(2)), plan_, backend, config_);
  EXPECT_FALSE(r.unparseable);
  EXPECT_EQ(r.exchanges, 2);
  EXPECT_TRUE(std::holds_alternative<verdict::Accept>(r.verdict));
  EXPECT_NE(backend.requests()[1].messages.back().content.find("target out of range"), std::string::npos);
}

TEST_F(AssessorTest, UnparseableOutputEscalatesToHalt) {
  config_.assess_reprompt_limit = 2;
  Script s;
  s.raw({{"match", {{"role", "assessor"}}}, {"response", response("it is probably fine", {})}});
  ScriptedBackend backend(s.entries());
  auto r = assess_task(input_for(2, completed(2)), plan_, backend, config_);
  EXPECT_TRUE(r.unparseable);
  EXPECT_EQ(r.exchanges, 3);
  EXPECT_EQ(std::get<verdict::Halt>(r.verdict).reason, kUnparseableReason);
}

TEST_F(AssessorTest, BudgetExhaustedAttemptIsNeverAccepted) {
  TaskResult r = completed(2);
  r.terminal = Terminal::kBudgetExhausted;
  r.draft_summary.reset();
  config_.assess_reprompt_limit = 1;
  Script s;
  s.verdict(2, 1, {{"kind", "accept"}});
  ScriptedBackend backend(s.entries());
  auto out = assess_task(input_for(2, r), plan_, backend, config_);
  EXPECT_TRUE(out.unparseable);
  EXPECT_FALSE(std::holds_alternative<verdict::Accept>(out.verdict));
}

// ---- project assessment ----------------------------------------------------

TEST_F(AssessorTest, ProjectAssessmentOutcomes) {
  ProjectState state;
  for (const auto& t : plan_.tasks) state.tasks[t.task_id] = TaskRecord{TaskState::accepted()};
  state.tasks[TaskId(6)] = TaskRecord{TaskState::pending()};
  ProjectAssessmentInput in{&plan_, &state, {}, TaskId(6), {"too noisy", "still noisy"}, 1};

  struct Case {
    json args;
    std::string kind;
  };
  for (const Case& c : {Case{{{"kind", "accept"}}, "accept"},
                        Case{{{"kind", "halt"}, {"reason", "data unusable"}}, "halt"},
                        Case{{{"kind", "redo_from"}, {"target", 4}, {"reason", "regenerate data"}}, "redo_from"}}) {
    Script s;
    s.verdict(6, 1, c.args, "project");
    ScriptedBackend inner(s.entries());
    CapturingBackend backend(inner);
    auto r = assess_project(in, backend, config_);
    EXPECT_FALSE(r.unparseable);
    EXPECT_EQ(verdict_kind(r.verdict), c.kind);
    const auto reqs = backend.requests();
    EXPECT_NE(reqs.front().messages.front().content.find("still noisy"), std::string::npos);
    EXPECT_EQ(reqs.front().meta.scope, "project");
  }
}

TEST_F(AssessorTest, PreflightUsesItsOwnScope) {
  Script s;
  s.verdict(4, std::nullopt, {{"kind", "accept"}}, "preflight");
  ScriptedBackend backend(s.entries());
  auto r = assess_preflight(plan_, *plan_.find(TaskId(4)), {}, backend, config_);
  EXPECT_TRUE(std::holds_alternative<verdict::Accept>(r.verdict));
}

// ---- input isolation -------------------------------------------------------

TEST_F(AssessorTest, InputNeverContainsTranscriptContent) {
  const fs::path dir = ws_.ensure_task_dir(TaskId(2));
  std::ofstream(dir / "transcript.attempt-1.jsonl") << canary_for(2) << "\n";
  fs::create_directories(dir / "logs");
  std::ofstream(dir / "logs" / "step-1.log") << "ran the fit\n";
  TaskSpec task = *plan_.find(TaskId(2));
  task.success_criteria.push_back("tasks/2/transcript.attempt-1.jsonl is tidy");
  plan_.tasks[1] = task;
  AssessmentInput in = build_assessment_input(plan_, task, completed(2), ws_, {}, config_);
  const std::string text = render_assessment(in);
  EXPECT_EQ(text.find(canary_for(2)), std::string::npos);
  EXPECT_NE(text.find("ran the fit"), std::string::npos);
  EXPECT_NE(text.find("transcript.attempt-1.jsonl"), std::string::npos);  // listed by name

  write_assessment_manifest(ws_, in);
  const fs::path manifest = dir / "assessment.attempt-1.json";
  ASSERT_TRUE(fs::exists(manifest));
  const json m = json::parse(read_file_bytes(manifest));
  EXPECT_EQ(m["task_id"], 2);
  EXPECT_EQ(m["attempt"], 1);
  EXPECT_EQ(read_file_bytes(manifest).find(canary_for(2)), std::string::npos);
}

TEST_F(AssessorTest, EvidenceRespectsTheCap) {
  config_.evidence_cap = 4096;
  const fs::path dir = ws_.ensure_task_dir(TaskId(2));
  fs::create_directories(dir / "logs");
  for (int i = 1; i <= 6; ++i) {
    std::ofstream(dir / "logs" / ("step-" + std::to_string(i) + ".log")) << std::string(10000, 'a' + i);
  }
  AssessmentInput in = input_for(2, completed(2));
  std::size_t total = 0;
  for (const auto& e : in.evidence) total += e.text.size();
  EXPECT_LE(total, config_.evidence_cap);
  ASSERT_FALSE(in.evidence.empty());
  EXPECT_EQ(in.evidence.front().source, "tasks/2/logs/step-6.log");
}
