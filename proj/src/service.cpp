#include "steward/service.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "steward/error.hpp"
#include "steward/serialize.hpp"

namespace steward {

namespace fs = std::filesystem;

namespace {

std::string project_status(const ProjectState& s) {
  if (s.completed) return "completed";
  if (s.halt) return "halted";
  if (s.plan) return "approved";
  if (s.proposed) return "awaiting_approval";
  return "planning";
}

bool concerns(const EventPayload& p, TaskId id) {
  return std::visit(
      [&](const auto& e) -> bool {
        using E = std::decay_t<decltype(e)>;
        if constexpr (requires { e.task_id; }) {
          return e.task_id == id;
        } else if constexpr (std::is_same_v<E, event::TasksInvalidated> ||
                             std::is_same_v<E, event::TasksRequeued>) {
          return e.tasks.count(id) > 0;
        } else if constexpr (std::is_same_v<E, event::ProjectHalted>) {
          return e.frontier.count(id) > 0;
        } else {
          return false;
        }
      },
      p);
}

// Files named <prefix><n><suffix> in dir, by n.
std::vector<std::pair<int, fs::path>> numbered_files(const fs::path& dir, const std::string& prefix,
                                                     const std::string& suffix) {
  std::vector<std::pair<int, fs::path>> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return out;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (!name.starts_with(prefix) || !name.ends_with(suffix)) continue;
    const std::string mid = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
    if (mid.empty() || !std::all_of(mid.begin(), mid.end(), ::isdigit)) continue;
    out.emplace_back(std::stoi(mid), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// True when some other open file description holds the writer lock.
bool journal_lock_held(const Workspace& ws) {
  const fs::path lock_path = ws.layout().journal / "events.lock";
  int fd = ::open(lock_path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) return false;
  const bool held = ::flock(fd, LOCK_SH | LOCK_NB) != 0;
  if (!held) ::flock(fd, LOCK_UN);
  ::close(fd);
  return held;
}

}  // namespace

json api_snapshot(const std::string& project_id, const ProjectState& s) {
  json tasks = json::array();
  const Plan* plan = s.plan ? &*s.plan : (s.proposed ? &*s.proposed : nullptr);
  if (plan != nullptr) {
    for (const auto& t : plan->tasks) {
      json deps = json::array();
      for (TaskId d : t.dependencies) deps.push_back(d.value);
      json entry{{"task_id", t.task_id.value}, {"title", t.title}, {"depends_on", deps}};
      auto it = s.plan ? s.tasks.find(t.task_id) : s.tasks.end();
      if (it != s.tasks.end()) {
        entry["state"] = to_string(it->second.state.kind);
        entry["attempt"] = it->second.attempts;
        entry["cause"] = it->second.state.cause ? json(it->second.state.cause->value) : json(nullptr);
      } else {
        entry["state"] = to_string(TaskState::Kind::kPending);
        entry["attempt"] = 0;
        entry["cause"] = nullptr;
      }
      tasks.push_back(std::move(entry));
    }
  }
  return json{{"project_id", project_id},
              {"status", project_status(s)},
              {"plan_version", s.plan ? json(s.approved_version) : json(nullptr)},
              {"proposed_version", s.proposed ? json(s.proposed->version) : json(nullptr)},
              {"goal", plan != nullptr ? json(plan->goal) : json(nullptr)},
              {"tasks", tasks},
              {"halt", s.halt ? json(*s.halt) : json(nullptr)},
              {"last_sequence_no", s.last_sequence_no}};
}

std::string render_status(const json& snap) {
  std::ostringstream out;
  out << "project  " << snap.at("project_id").get<std::string>() << "\n";
  out << "status   " << snap.at("status").get<std::string>() << "\n";
  out << "plan     ";
  if (snap.at("plan_version").is_null()) {
    out << "none approved";
  } else {
    out << "v" << snap.at("plan_version").get<int>();
  }
  if (!snap.at("proposed_version").is_null()) {
    out << " (v" << snap.at("proposed_version").get<int>() << " awaiting approval)";
  }
  out << "\nevents   " << snap.at("last_sequence_no").get<std::uint64_t>() << "\n";
  if (const json& h = snap.at("halt"); !h.is_null()) {
    std::string frontier;
    for (const auto& id : h.at("frontier")) {
      frontier += (frontier.empty() ? "" : ", ") + std::to_string(id.get<int>());
    }
    out << "halt     " << h.at("reason").get<std::string>() << " (by "
        << h.at("issued_by").get<std::string>() << "; frontier: "
        << (frontier.empty() ? "none" : frontier) << ")\n";
  }
  const json& tasks = snap.at("tasks");
  if (!tasks.empty()) out << "tasks\n";
  for (const auto& t : tasks) {
    std::string state = t.at("state").get<std::string>();
    if (!t.at("cause").is_null()) state += " by " + std::to_string(t.at("cause").get<int>());
    out << "  " << std::setw(3) << t.at("task_id").get<int>() << "  " << std::left << std::setw(22)
        << state << std::right << " attempts " << t.at("attempt").get<int>() << "  "
        << t.at("title").get<std::string>() << "\n";
  }
  return out.str();
}

json plan_document(const Workspace& ws, const ProjectState& s, const std::vector<Event>& events,
                   int version) {
  const auto versions = ws.plan_versions();
  if (std::find(versions.begin(), versions.end(), version) == versions.end()) {
    throw Error(ErrorCode::kNotFound, "no plan version " + std::to_string(version));
  }
  std::string status = "superseded";
  std::optional<std::string> resume_instruction;
  std::optional<std::string> rejection;
  for (const auto& e : events) {
    if (const auto* p = std::get_if<event::PlanProposed>(&e.payload); p && p->plan.version == version) {
      resume_instruction = p->resume_instruction;
    } else if (const auto* r = std::get_if<event::PlanRejected>(&e.payload);
               r && r->version == version) {
      status = "rejected";
      rejection = r->comment;
    }
  }
  if (s.plan && s.approved_version == version) status = "approved";
  if (s.proposed && s.proposed->version == version) status = "proposed";
  return json{{"version", version},
              {"status", status},
              {"plan", ws.load_plan(version)},
              {"resume_instruction", resume_instruction ? json(*resume_instruction) : json(nullptr)},
              {"rejection_comment", rejection ? json(*rejection) : json(nullptr)}};
}

json task_detail(const Workspace& ws, const ProjectState& s, const std::vector<Event>& events,
                 TaskId id) {
  const TaskSpec* spec = s.plan ? s.plan->find(id) : nullptr;
  if (spec == nullptr && s.proposed) spec = s.proposed->find(id);
  if (spec == nullptr) throw Error(ErrorCode::kNotFound, "no task " + to_string(id));

  json history = json::array();
  for (const auto& e : events) {
    if (concerns(e.payload, id)) history.push_back(e);
  }
  json record = nullptr;
  if (auto it = s.tasks.find(id); it != s.tasks.end()) record = it->second;

  json summary = nullptr;
  if (auto bytes = ws.read_summary_bytes(id)) {
    try {
      summary = json::parse(*bytes);
    } catch (const json::exception&) {
      summary = *bytes;
    }
  }
  const fs::path dir = ws.task_dir(id);
  json manifests = json::array();
  for (const auto& [n, p] : numbered_files(dir, "assessment.attempt-", ".json")) {
    try {
      manifests.push_back(json::parse(file_text(p)));
    } catch (const json::exception&) {
    }
  }
  json transcripts = json::array();
  for (const auto& [n, p] : numbered_files(dir, "transcript.attempt-", ".jsonl")) {
    const std::string text = file_text(p);
    transcripts.push_back({{"attempt", n},
                           {"path", fs::relative(p, ws.root()).generic_string()},
                           {"bytes", text.size()},
                           {"lines", std::count(text.begin(), text.end(), '\n')}});
  }
  json archived = json::array();
  std::error_code ec;
  const std::string prefix = to_string(id) + ".attempt-";
  if (fs::is_directory(ws.layout().archive, ec)) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(ws.layout().archive, ec)) {
      const std::string name = entry.path().filename().string();
      if (name.starts_with(prefix)) names.push_back("archive/" + name);
    }
    std::sort(names.begin(), names.end());
    for (auto& n : names) archived.push_back(std::move(n));
  }
  return json{{"task_id", id.value},
              {"spec", *spec},
              {"record", record},
              {"events", history},
              {"summary", summary},
              {"assessments", manifests},
              {"transcripts", transcripts},
              {"archived_attempts", archived}};
}

// ---------------------------------------------------------------------------

ProjectHost::ProjectHost(const fs::path& root, Options options) : options_(std::move(options)) {
  workspace_ = std::make_unique<Workspace>(Workspace::open(root));
  const ProjectSpec spec = workspace_->load_project();
  project_id_ = spec.project_id;
  const RunConfig config = options_.config.value_or(spec.config);
  try {
    Journal journal = Journal::open(workspace_->journal_path(), config.sync_journal);
    orchestrator_ = std::make_unique<Orchestrator>(*workspace_, std::move(journal),
                                                   options_.backends, config,
                                                   options_.orchestrator);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kConflict) throw;
  }
  JournalContents contents = Journal::read(workspace_->journal_path());
  events_ = std::move(contents.events);
  lines_ = std::move(contents.lines);
  if (orchestrator_) {
    orchestrator_->set_listener(
        [this](const Event& e, const std::string& line) { on_event(e, line); });
  }
}

ProjectHost::~ProjectHost() {
  if (orchestrator_ && orchestrator_->running()) {
    orchestrator_->request_halt("service stopped", "operator");
  }
  if (run_thread_.joinable()) run_thread_.join();
  if (orchestrator_) orchestrator_->set_listener(nullptr);
}

void ProjectHost::on_event(const Event& e, const std::string& line) {
  {
    std::lock_guard lock(mu_);
    events_.push_back(e);
    lines_.push_back(line);
  }
  cv_.notify_all();
}

void ProjectHost::refresh_from_file() const {
  try {
    JournalContents contents = Journal::read(workspace_->journal_path());
    std::lock_guard lock(mu_);
    if (contents.lines.size() > lines_.size()) {
      events_ = std::move(contents.events);
      lines_ = std::move(contents.lines);
    }
  } catch (const Error&) {
    // A writer may be mid-line; the next poll sees the whole record.
  }
}

std::vector<Event> ProjectHost::events_copy() const {
  if (!orchestrator_) refresh_from_file();
  std::lock_guard lock(mu_);
  return events_;
}

ProjectState ProjectHost::state() const {
  if (orchestrator_) return orchestrator_->state();
  return fold_state(events_copy());
}

json ProjectHost::snapshot() const { return api_snapshot(project_id_, state()); }

json ProjectHost::list_entry() const {
  const ProjectState s = state();
  return json{{"project_id", project_id_},
              {"status", project_status(s)},
              {"plan_version", s.plan ? json(s.approved_version) : json(nullptr)},
              {"last_sequence_no", s.last_sequence_no},
              {"running", running()},
              {"writable", writable()}};
}

json ProjectHost::plan(int version) const {
  const auto events = events_copy();
  return plan_document(*workspace_, fold_state(events), events, version);
}

json ProjectHost::task(TaskId id) const {
  const auto events = events_copy();
  return task_detail(*workspace_, fold_state(events), events, id);
}

std::vector<std::string> ProjectHost::lines_after(std::uint64_t after,
                                                  std::chrono::milliseconds wait, bool* idle) {
  if (!orchestrator_) {
    const auto deadline = std::chrono::steady_clock::now() + wait;
    while (true) {
      refresh_from_file();
      {
        std::lock_guard lock(mu_);
        if (lines_.size() > after) {
          if (idle) *idle = false;
          return {lines_.begin() + static_cast<std::ptrdiff_t>(after), lines_.end()};
        }
      }
      const bool other_writer = journal_lock_held(*workspace_);
      if (!other_writer || std::chrono::steady_clock::now() >= deadline) {
        if (idle) *idle = !other_writer;
        return {};
      }
      std::this_thread::sleep_for(std::min(wait, std::chrono::milliseconds(50)));
    }
  }
  std::unique_lock lock(mu_);
  auto ready = [&] { return lines_.size() > after; };
  if (!ready() && wait.count() > 0) cv_.wait_for(lock, wait, ready);
  if (idle) *idle = !run_active_;
  if (!ready()) return {};
  return {lines_.begin() + static_cast<std::ptrdiff_t>(after), lines_.end()};
}

namespace {

Orchestrator& require_writer(Orchestrator* o) {
  if (o == nullptr) {
    throw Error(ErrorCode::kConflict, "project is run by another process; this view is read-only");
  }
  return *o;
}

}  // namespace

json ProjectHost::approve(int version, Decision decision, const std::string& actor,
                          const std::string& comment) {
  Orchestrator& o = require_writer(orchestrator_.get());
  const std::uint64_t before = o.state().last_sequence_no;
  ApprovalOutcome outcome = o.decide(version, decision, actor, comment);
  if (!outcome.event) throw Error(ErrorCode::kConflict, outcome.warning);
  json events = json::array();
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = before; i < lines_.size(); ++i) events.push_back(events_[i]);
  }
  const bool started = decision == Decision::kApprove && options_.auto_run && start_run();
  return json{{"events", events}, {"run_started", started}};
}

json ProjectHost::resume(const std::string& instruction) {
  Orchestrator& o = require_writer(orchestrator_.get());
  return json{{"events", json::array({o.propose_resume(instruction)})}};
}

json ProjectHost::halt(const std::string& reason) {
  if (!orchestrator_) {
    if (!journal_lock_held(*workspace_)) {
      throw Error(ErrorCode::kConflict, "project is read-only here and no engine is running");
    }
    const ProjectState s = state();
    if (s.halt) throw Error(ErrorCode::kFailedPrecondition, "project is already halted");
    write_halt_request(*workspace_, reason);
    return json{{"status", "requested"}};
  }
  if (orchestrator_->running()) {
    if (orchestrator_->state().halt) {
      throw Error(ErrorCode::kFailedPrecondition, "project is already halted");
    }
    orchestrator_->request_halt(reason, "operator");
    return json{{"status", "requested"}};
  }
  return json{{"status", "halted"}, {"events", json::array({orchestrator_->halt(reason, "operator")})}};
}

bool ProjectHost::start_run() {
  if (!orchestrator_) return false;
  const ProjectState s = orchestrator_->state();
  if (!s.plan || s.halt || s.completed) return false;
  std::lock_guard lock(mu_);
  if (run_active_) return false;
  if (run_thread_.joinable()) run_thread_.join();
  run_active_ = true;
  run_thread_ = std::thread([this] {
    RunOutcome outcome;
    try {
      outcome = orchestrator_->run();
    } catch (const std::exception& e) {
      outcome.status = RunStatus::kFatal;
      outcome.detail = e.what();
    }
    {
      std::lock_guard inner(mu_);
      outcome_ = std::move(outcome);
      run_active_ = false;
    }
    cv_.notify_all();
  });
  return true;
}

bool ProjectHost::running() const {
  std::lock_guard lock(mu_);
  return run_active_;
}

std::optional<RunOutcome> ProjectHost::wait_run() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return !run_active_; });
  return outcome_;
}

std::optional<RunOutcome> ProjectHost::last_outcome() const {
  std::lock_guard lock(mu_);
  return outcome_;
}

std::pair<std::string, int> parse_listen_address(const std::string& text) {
  std::string host = "127.0.0.1";
  std::string port = text;
  if (auto colon = text.rfind(':'); colon != std::string::npos) {
    if (colon > 0) host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  if (port.empty() || !std::all_of(port.begin(), port.end(), ::isdigit) || port.size() > 5) {
    throw Error(ErrorCode::kInvalidArgument, "invalid listen address: " + text);
  }
  const int p = std::stoi(port);
  if (p > 65535) throw Error(ErrorCode::kInvalidArgument, "invalid listen address: " + text);
  return {host, p};
}

}  // namespace steward
