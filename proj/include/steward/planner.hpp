#pragma once

#include <chrono>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "steward/backend.hpp"
#include "steward/plan_graph.hpp"
#include "steward/state.hpp"
#include "steward/types.hpp"

namespace steward {

// Where planner questions go. The engine never answers on the user's behalf
// except through UnattendedChannel, which is an explicit choice.
class InteractionChannel {
 public:
  virtual ~InteractionChannel() = default;
  // nullopt means the user abandoned planning.
  virtual std::optional<std::string> ask(const std::string& question) = 0;
};

class UnattendedChannel final : public InteractionChannel {
 public:
  explicit UnattendedChannel(std::chrono::milliseconds wait = {}) : wait_(wait) {}
  std::optional<std::string> ask(const std::string& question) override;
  static constexpr std::string_view kAnswer = "Proceed with stated assumptions.";

 private:
  std::chrono::milliseconds wait_;
};

// Answers in order; abandons when the list runs out.
class ScriptedChannel final : public InteractionChannel {
 public:
  explicit ScriptedChannel(std::vector<std::string> answers) : answers_(std::move(answers)) {}
  std::optional<std::string> ask(const std::string& question) override;
  const std::vector<std::string>& asked() const { return asked_; }

 private:
  std::vector<std::string> answers_;
  std::vector<std::string> asked_;
  std::size_t next_ = 0;
};

// JSON answer file: {"answers": ["...", ...]} consumed in order, or
// {"questions": {"exact question": "answer"}}; falls back to "default".
class AnswerFileChannel final : public InteractionChannel {
 public:
  explicit AnswerFileChannel(const nlohmann::json& document);
  std::optional<std::string> ask(const std::string& question) override;

 private:
  std::vector<std::string> ordered_;
  std::map<std::string, std::string> by_question_;
  std::optional<std::string> fallback_;
  std::size_t next_ = 0;
};

// Terminal prompt. An empty line or EOF abandons.
class StreamChannel final : public InteractionChannel {
 public:
  StreamChannel(std::istream& in, std::ostream& out) : in_(in), out_(out) {}
  std::optional<std::string> ask(const std::string& question) override;

 private:
  std::istream& in_;
  std::ostream& out_;
};

struct Abandoned {
  std::string reason;
};

struct PlanningSession {
  ProjectSpec spec;
  std::vector<nlohmann::json> exchanges;  // {"request_digest", "response"}
  std::vector<std::pair<std::string, std::string>> questions_asked;
  std::variant<Plan, Abandoned> outcome;

  bool succeeded() const { return std::holds_alternative<Plan>(outcome); }
  const Plan& plan() const { return std::get<Plan>(outcome); }
};

ToolSchema propose_plan_schema();
ToolSchema ask_user_schema();

struct PlanningOptions {
  int version = 1;
  std::optional<std::string> rejection_comment;  // from a rejected earlier round
  int max_questions = 8;
};

// Invalid proposals are reprompted with the violation list up to
// config.assess_reprompt_limit times, then kPlanningFailed.
PlanningSession plan_project(const ProjectSpec& spec, Backend& backend,
                             InteractionChannel& channel, const RunConfig& config,
                             const PlanningOptions& options = {});

enum class Decision { kApprove, kReject };

struct ApprovalOutcome {
  std::optional<EventPayload> event;  // nullopt: no-op
  std::string warning;
};

// Approving a version that is already approved is a no-op with a warning.
// Throws kFailedPrecondition when the version is not proposed.
ApprovalOutcome approve_plan(const ProjectState& state, int version, Decision decision,
                             const std::string& actor, const std::string& comment = {});

// Accepted tasks of old_plan must reappear unchanged in new_plan.
ValidationReport validate_revision(const Plan& old_plan, const Plan& new_plan,
                                   const TaskIdSet& accepted);

// Builds version+1 for a halted project. An empty instruction reuses the
// current plan without consulting the backend.
Plan revise_plan_for_resume(const ProjectState& state, const std::string& instruction,
                            Backend& backend, const RunConfig& config);

}  // namespace steward
