#pragma once

#include <optional>
#include <span>
#include <string>

#include "steward/types.hpp"

namespace steward {

struct TaskRecord {
  TaskState state;
  int attempts = 0;   // dispatch count over the task's lifetime
  int revisions = 0;  // Revise verdicts in the current cycle
  int steps = 0;      // StepExecuted count of the current attempt
  std::optional<std::string> feedback;  // handed to the next attempt
  std::optional<std::string> last_terminal;

  friend bool operator==(const TaskRecord&, const TaskRecord&) = default;
};

struct HaltRecord {
  std::string reason;
  TaskIdSet frontier;
  std::string issued_by;
  std::string timestamp;

  friend bool operator==(const HaltRecord&, const HaltRecord&) = default;
};

struct ProjectState {
  std::uint64_t last_sequence_no = 0;
  int latest_version = 0;               // highest proposed version seen
  int approved_version = 0;
  std::optional<Plan> plan;             // approved plan
  std::optional<Plan> proposed;         // awaiting approval
  std::optional<std::string> proposed_resume_instruction;
  std::map<TaskId, TaskRecord> tasks;
  std::optional<HaltRecord> halt;
  bool completed = false;

  TaskStates task_states() const;
  int in_flight_count() const;
  int running_count() const;
  bool all_accepted() const;
  bool approved() const { return plan.has_value(); }

  friend bool operator==(const ProjectState&, const ProjectState&) = default;
};

// One step of the fold. Throws kCorruptJournal for sequence gaps, duplicates,
// or transitions the engine never writes.
void apply_event(ProjectState& state, const Event& event);

ProjectState fold_state(std::span<const Event> events);

}  // namespace steward
