#include "steward/workspace.hpp"

#include <algorithm>
#include <regex>

#include "steward/digest.hpp"
#include "steward/error.hpp"
#include "steward/serialize.hpp"

namespace steward {
namespace fs = std::filesystem;

namespace {

bool denied(const std::error_code& ec) {
  return ec == std::errc::permission_denied || ec == std::errc::operation_not_permitted ||
         ec == std::errc::read_only_file_system;
}

}  // namespace

WorkspaceLayout WorkspaceLayout::under(const fs::path& root) {
  WorkspaceLayout l;
  l.root = root;
  l.tasks = root / "tasks";
  l.shared = root / "shared";
  l.summaries = root / "summaries";
  l.journal = root / "journal";
  l.plan = root / "plan";
  l.archive = root / "archive";
  return l;
}

Workspace::Workspace(const fs::path& root)
    : layout_(WorkspaceLayout::under(fs::weakly_canonical(fs::absolute(root)))), jail_(root) {}

Workspace Workspace::init(const fs::path& root) {
  std::error_code ec;
  if (fs::exists(root / "journal" / "events.jsonl", ec)) {
    throw Error(ErrorCode::kAlreadyExists, "workspace exists; use resume: " + root.string());
  }
  if (fs::exists(root, ec)) {
    if (!fs::is_directory(root, ec)) {
      throw Error(ErrorCode::kAlreadyExists, "workspace root is not a directory: " + root.string());
    }
    if (!fs::is_empty(root, ec)) {
      throw Error(ErrorCode::kAlreadyExists, "workspace root is not empty: " + root.string());
    }
  }
  fs::create_directories(root, ec);
  if (ec) {
    throw Error(denied(ec) ? ErrorCode::kPermissionDenied
                    : ErrorCode::kIo,
                "cannot create workspace root " + root.string() + ": " + ec.message());
  }
  Workspace ws(root);
  for (const auto& dir : {ws.layout_.tasks, ws.layout_.shared, ws.layout_.summaries,
                          ws.layout_.journal, ws.layout_.plan, ws.layout_.archive}) {
    fs::create_directory(dir, ec);
    if (ec) {
      throw Error(denied(ec) ? ErrorCode::kPermissionDenied
                      : ErrorCode::kIo,
                  "cannot create " + dir.string() + " in workspace root " + root.string() + ": " +
                      ec.message());
    }
  }
  return ws;
}

Workspace Workspace::open(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root / "journal", ec) || !fs::is_directory(root / "tasks", ec)) {
    throw Error(ErrorCode::kNotFound, "not a workspace: " + root.string());
  }
  return Workspace(root);
}

fs::path Workspace::task_dir(TaskId id) const { return layout_.tasks / to_string(id); }

fs::path Workspace::ensure_task_dir(TaskId id) const {
  auto dir = task_dir(id);
  fs::create_directories(dir);
  return dir;
}

std::string Workspace::task_dir_relative(TaskId id) const { return "tasks/" + to_string(id); }

fs::path Workspace::save_plan(const Plan& plan) const {
  auto path = layout_.plan / ("version-" + std::to_string(plan.version) + ".json");
  write_file_atomic(path, json(plan).dump(2) + "\n", fault_, sync_);
  return path;
}

Plan Workspace::load_plan(int version) const {
  auto path = layout_.plan / ("version-" + std::to_string(version) + ".json");
  return decode<Plan>(parse_json(read_file_bytes(path), path.string()), path.string());
}

std::vector<int> Workspace::plan_versions() const {
  std::vector<int> out;
  static const std::regex kName(R"(version-(\d+)\.json)");
  for (const auto& entry : fs::directory_iterator(layout_.plan)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, kName)) out.push_back(std::stoi(m[1]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void Workspace::save_project(const ProjectSpec& spec) const {
  write_file_atomic(layout_.plan / "project.json", json(spec).dump(2) + "\n", fault_, sync_);
}

ProjectSpec Workspace::load_project() const {
  auto path = layout_.plan / "project.json";
  return decode<ProjectSpec>(parse_json(read_file_bytes(path), path.string()), path.string());
}

fs::path Workspace::summary_path(TaskId id) const {
  return layout_.summaries / ("task-" + to_string(id) + ".json");
}

std::string missing_artifacts_message(const std::vector<std::string>& missing) {
  std::string out = "missing: ";
  for (std::size_t i = 0; i < missing.size(); ++i) {
    if (i) out += ", ";
    out += missing[i];
  }
  return out;
}

namespace {

std::vector<std::string> missing_artifacts(const Workspace& ws, const TaskSummary& s) {
  std::vector<std::string> missing;
  for (const auto& a : s.artifact_index) {
    std::error_code ec;
    fs::path p = ws.resolve(a.path);  // escapes throw before any filesystem access
    if (!fs::exists(p, ec)) missing.push_back(a.path);
  }
  return missing;
}

}  // namespace

fs::path Workspace::write_summary(const TaskSummary& summary, std::size_t cap) const {
  auto missing = missing_artifacts(*this, summary);
  if (!missing.empty()) throw Error(ErrorCode::kNotFound, missing_artifacts_message(missing));
  const std::string body = json(summary).dump(2) + "\n";
  if (body.size() > cap) {
    throw Error(ErrorCode::kInvalidArgument, "summary of task " + to_string(summary.task_id) +
                                                 " is " + std::to_string(body.size()) +
                                                 " bytes, over the cap of " + std::to_string(cap));
  }
  if (after_artifact_check) after_artifact_check();

  const fs::path dest = summary_path(summary.task_id);
  const fs::path tmp = layout_.summaries / (".task-" + to_string(summary.task_id) + ".json.tmp");
  write_file_atomic(tmp, body, nullptr, sync_);
  // Second check right before publishing: a summary is never visible while
  // one of its artifacts is gone.
  missing = missing_artifacts(*this, summary);
  if (!missing.empty()) {
    fs::remove(tmp);
    throw Error(ErrorCode::kNotFound, missing_artifacts_message(missing));
  }
  fault_point(fault_, "summary.before_publish");
  fs::rename(tmp, dest);
  fault_point(fault_, "summary.published");
  return dest;
}

std::optional<std::string> Workspace::read_summary_bytes(TaskId id) const {
  std::error_code ec;
  auto path = summary_path(id);
  if (!fs::exists(path, ec)) return std::nullopt;
  return read_file_bytes(path);
}

std::optional<TaskSummary> Workspace::read_summary(TaskId id) const {
  auto bytes = read_summary_bytes(id);
  if (!bytes) return std::nullopt;
  return decode<TaskSummary>(parse_json(*bytes, "summary"), "summary of task " + to_string(id));
}

std::vector<TaskSummary> Workspace::read_dependency_summaries(const TaskSpec& task) const {
  std::vector<TaskSummary> out;
  for (TaskId dep : task.dependencies) {  // std::set: ascending order
    auto s = read_summary(dep);
    if (!s) {
      throw Error(ErrorCode::kIntegrity, "summary of accepted dependency " + to_string(dep) +
                                             " of task " + to_string(task.task_id) +
                                             " is missing");
    }
    out.push_back(std::move(*s));
  }
  return out;
}

fs::path Workspace::unique_archive_path(const std::string& base) const {
  fs::path candidate = layout_.archive / base;
  std::error_code ec;
  for (int n = 1; fs::exists(candidate, ec); ++n) {
    candidate = layout_.archive / (base + "." + std::to_string(n));
  }
  return candidate;
}

std::optional<fs::path> Workspace::archive_attempt(TaskId id, int attempt) const {
  const fs::path dir = task_dir(id);
  std::error_code ec;
  if (!fs::exists(dir, ec) || fs::is_empty(dir, ec)) return std::nullopt;
  const fs::path dest = unique_archive_path(to_string(id) + ".attempt-" + std::to_string(attempt));
  fault_point(fault_, "archive.before_move");
  fs::rename(dir, dest);
  fs::create_directory(dir);
  return dest;
}

std::optional<fs::path> Workspace::archive_summary(TaskId id, int attempt) const {
  const fs::path src = summary_path(id);
  std::error_code ec;
  if (!fs::exists(src, ec)) return std::nullopt;
  fs::create_directories(layout_.archive / "summaries");
  fs::path dest = layout_.archive / "summaries" /
                  ("task-" + to_string(id) + ".attempt-" + std::to_string(attempt) + ".json");
  for (int n = 1; fs::exists(dest, ec); ++n) {
    dest = layout_.archive / "summaries" /
           ("task-" + to_string(id) + ".attempt-" + std::to_string(attempt) + "." +
            std::to_string(n) + ".json");
  }
  fault_point(fault_, "archive.summary");
  fs::rename(src, dest);
  return dest;
}

std::vector<std::string> Workspace::retract_shared(const std::vector<std::string>& paths,
                                                   std::uint64_t tag) const {
  std::vector<std::string> moved;
  for (const auto& rel : paths) {
    if (!rel.starts_with("shared/")) continue;
    fs::path src;
    try {
      src = resolve(rel);
    } catch (const Error&) {
      continue;
    }
    std::error_code ec;
    if (!fs::exists(src, ec)) continue;
    fs::path dest = layout_.archive / "retracted" / (rel + ".redo-" + std::to_string(tag));
    fs::create_directories(dest.parent_path());
    fs::rename(src, dest);
    moved.push_back(rel);
  }
  return moved;
}

std::vector<ArtifactRecord> Workspace::register_artifacts(const TaskSummary& summary) const {
  std::vector<ArtifactRecord> out;
  for (const auto& a : summary.artifact_index) {
    const fs::path p = resolve(a.path);
    std::error_code ec;
    if (!fs::exists(p, ec)) throw Error(ErrorCode::kNotFound, missing_artifacts_message({a.path}));
    ArtifactRecord rec{a.path, summary.task_id, a.description, 0, {}};
    if (fs::is_regular_file(p, ec)) {
      const std::string bytes = read_file_bytes(p);
      rec.byte_length = bytes.size();
      rec.content_digest = sha256_hex(bytes);
    } else {
      // Directories are digested over their sorted relative listing and contents.
      std::vector<std::string> parts;
      for (const auto& entry : fs::recursive_directory_iterator(p)) {
        if (!entry.is_regular_file()) continue;
        const std::string bytes = read_file_bytes(entry.path());
        rec.byte_length += bytes.size();
        parts.push_back(entry.path().lexically_relative(p).generic_string() + ":" +
                        sha256_hex(bytes));
      }
      std::sort(parts.begin(), parts.end());
      rec.content_digest = sha256_hex(parts);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ArtifactRecord> Workspace::artifacts() const {
  std::vector<ArtifactRecord> out;
  static const std::regex kName(R"(task-(\d+)\.json)");
  std::vector<int> ids;
  for (const auto& entry : fs::directory_iterator(layout_.summaries)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, kName)) ids.push_back(std::stoi(m[1]));
  }
  std::sort(ids.begin(), ids.end());
  for (int id : ids) {
    auto s = read_summary(TaskId(id));
    if (!s) continue;
    for (auto& rec : register_artifacts(*s)) out.push_back(std::move(rec));
  }
  return out;
}

WorkspaceLayout init_workspace(const fs::path& root, const Plan& plan) {
  auto ws = Workspace::init(root);
  Plan v1 = plan;
  v1.version = 1;
  ws.save_plan(v1);
  return ws.layout();
}

}  // namespace steward
