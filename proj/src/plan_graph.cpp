#include "steward/plan_graph.hpp"

#include <algorithm>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>

#include "steward/error.hpp"

namespace steward {
namespace {

std::string join_ids(const std::vector<TaskId>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ",";
    out += to_string(ids[i]);
  }
  return out;
}

// Tarjan's SCC over the dependency edges (task -> dependency). Only edges to
// existing tasks are followed.
std::vector<std::vector<TaskId>> cyclic_components(
    const std::map<TaskId, const TaskSpec*>& by_id) {
  std::map<TaskId, int> index, low;
  std::map<TaskId, bool> on_stack;
  std::vector<TaskId> stack;
  std::vector<std::vector<TaskId>> out;
  int counter = 0;

  std::function<void(TaskId)> visit = [&](TaskId v) {
    index[v] = low[v] = counter++;
    stack.push_back(v);
    on_stack[v] = true;
    for (TaskId w : by_id.at(v)->dependencies) {
      if (!by_id.contains(w)) continue;
      if (!index.contains(w)) {
        visit(w);
        low[v] = std::min(low[v], low[w]);
      } else if (on_stack[w]) {
        low[v] = std::min(low[v], index[w]);
      }
    }
    if (low[v] == index[v]) {
      std::vector<TaskId> comp;
      TaskId w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack[w] = false;
        comp.push_back(w);
      } while (w != v);
      const bool self_loop = by_id.at(v)->dependencies.contains(v);
      if (comp.size() > 1 || self_loop) {
        std::sort(comp.begin(), comp.end());
        out.push_back(std::move(comp));
      }
    }
  };

  for (const auto& [id, _] : by_id) {
    if (!index.contains(id)) visit(id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool clean_relative(const std::string& p) {
  if (p.empty() || p.front() == '/') return false;
  for (const auto& part : std::filesystem::path(p)) {
    if (part == "..") return false;
  }
  return true;
}

}  // namespace

std::string render(const ValidationReport& report) {
  std::string out;
  for (const auto& v : report) {
    if (!out.empty()) out += "\n";
    out += "- " + v.message;
  }
  return out;
}

ValidationReport validate_plan(const Plan& plan) {
  ValidationReport report;
  auto add = [&](std::optional<TaskId> id, std::string rule, std::string msg) {
    report.push_back(Violation{id, std::move(rule), std::move(msg)});
  };

  if (plan.tasks.empty()) {
    add(std::nullopt, "empty", "plan has no tasks");
    return report;
  }
  if (plan.version < 1) add(std::nullopt, "version", "plan version must be >= 1");

  std::map<TaskId, const TaskSpec*> by_id;
  for (const auto& t : plan.tasks) {
    if (t.task_id.value <= 0) {
      add(t.task_id, "task-id", "task id " + to_string(t.task_id) + " must be positive");
    }
    if (!by_id.emplace(t.task_id, &t).second) {
      add(t.task_id, "duplicate-id", "task id " + to_string(t.task_id) + " appears more than once");
    }
  }
  // Deduplicate so duplicate ids do not double-report the checks below.
  std::map<TaskId, bool> checked;
  for (const auto& t : plan.tasks) {
    if (checked[t.task_id]) continue;
    checked[t.task_id] = true;
    const std::string who = "task " + to_string(t.task_id);
    if (t.objective.empty()) add(t.task_id, "objective", who + " has no objective");
    if (t.success_criteria.empty()) {
      add(t.task_id, "success-criteria", who + " has no success criteria");
    }
    for (TaskId dep : t.dependencies) {
      if (!by_id.contains(dep)) {
        add(t.task_id, "unknown-dependency",
            who + " depends on unknown task " + to_string(dep));
      }
    }
    for (const auto& artifact : t.expected_artifacts) {
      if (!clean_relative(artifact)) {
        add(t.task_id, "artifact-path",
            who + " expects artifact outside the workspace: " + artifact);
      }
    }
  }

  for (const auto& comp : cyclic_components(by_id)) {
    add(comp.front(), "cycle", "cycle through " + join_ids(comp));
  }

  std::sort(report.begin(), report.end());
  report.erase(std::unique(report.begin(), report.end()), report.end());
  return report;
}

TaskIdSet ready_set(const Plan& plan, const TaskStates& states) {
  TaskIdSet ready;
  for (const auto& t : plan.tasks) {
    auto it = states.find(t.task_id);
    if (it == states.end()) {
      throw Error(ErrorCode::kInvalidArgument, "no state for task " + to_string(t.task_id));
    }
    if (!it->second.is(TaskState::Kind::kPending)) continue;
    bool deps_done = std::all_of(t.dependencies.begin(), t.dependencies.end(), [&](TaskId d) {
      auto dep = states.find(d);
      return dep != states.end() && dep->second.is(TaskState::Kind::kAccepted);
    });
    if (deps_done) ready.insert(t.task_id);
  }
  return ready;
}

TaskIdSet transitive_dependents(const Plan& plan, TaskId target) {
  std::map<TaskId, std::vector<TaskId>> dependents;
  for (const auto& t : plan.tasks) {
    for (TaskId d : t.dependencies) dependents[d].push_back(t.task_id);
  }
  TaskIdSet seen;
  std::deque<TaskId> queue{target};
  while (!queue.empty()) {
    TaskId cur = queue.front();
    queue.pop_front();
    for (TaskId next : dependents[cur]) {
      if (next != target && seen.insert(next).second) queue.push_back(next);
    }
  }
  return seen;
}

TaskIdSet invalidation_closure(const Plan& plan, TaskId target, const TaskStates& states) {
  if (plan.find(target) == nullptr) {
    throw Error(ErrorCode::kIntegrity,
                "corrupt verdict: redo target " + to_string(target) + " is not in the plan");
  }
  TaskIdSet out{target};
  for (TaskId id : transitive_dependents(plan, target)) {
    auto it = states.find(id);
    if (it != states.end() && !it->second.is(TaskState::Kind::kPending)) out.insert(id);
  }
  return out;
}

}  // namespace steward
