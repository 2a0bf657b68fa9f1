#pragma once

#include <optional>
#include <string>
#include <vector>

#include "steward/types.hpp"

namespace steward {

struct Violation {
  std::optional<TaskId> task_id;
  std::string rule;     // stable identifier, e.g. "cycle", "unknown-dependency"
  std::string message;  // human-readable, names the offending task

  friend auto operator<=>(const Violation&, const Violation&) = default;
};

using ValidationReport = std::vector<Violation>;

std::string render(const ValidationReport& report);

// Structural validation of planner output. The report is sorted, so it does
// not depend on the order of plan.tasks.
ValidationReport validate_plan(const Plan& plan);

// Pending tasks whose dependencies are all Accepted, ascending by id.
// Throws kInvalidArgument if states does not cover every task in the plan.
TaskIdSet ready_set(const Plan& plan, const TaskStates& states);

// target plus every transitive dependent that is not Pending.
// Throws kIntegrity when target is not part of the plan.
TaskIdSet invalidation_closure(const Plan& plan, TaskId target, const TaskStates& states);

// Transitive dependents of target (excluding target).
TaskIdSet transitive_dependents(const Plan& plan, TaskId target);

}  // namespace steward
