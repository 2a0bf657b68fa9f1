#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "steward/error.hpp"
#include "steward/serialize.hpp"
#include "steward/service.hpp"

namespace steward {

namespace fs = std::filesystem;

namespace {

std::atomic<int> g_interrupts{0};

extern "C" void on_interrupt(int) { g_interrupts.fetch_add(1); }

struct Flags {
  std::string workspace = ".";
  std::string config;
  bool yes = false;
  std::string answer_file;
  std::string script;
  std::string record;
  std::string replay;

  std::string instruction;
  std::string instruction_file;
  std::string project_id;
  std::vector<std::string> attachments;
  std::string plan_file;
  int version = 0;
  bool reject = false;
  std::string comment;
  std::string actor = "operator";
  std::string listen;
  bool json_output = false;
  std::string reason = "halt requested by operator";
  std::string journal_file;
  int task = 0;
};

std::optional<RunConfig> config_override(const Flags& f) {
  if (f.config.empty()) return std::nullopt;
  std::ifstream in(f.config);
  if (!in) throw Error(ErrorCode::kConfig, "cannot read config " + f.config);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = decode<RunConfig>(parse_json(ss.str(), "config " + f.config), "config " + f.config);
  if (auto problems = validate_config(c); !problems.empty()) {
    throw Error(ErrorCode::kConfig, "invalid configuration: " + problems.front());
  }
  return c;
}

std::string api_token(const RunConfig& c) {
  if (!c.api_token.empty()) return c.api_token;
  const char* env = std::getenv("STEWARD_API_TOKEN");
  return env ? env : "";
}

// Backends for every role, owned for the lifetime of the command.
struct BackendSet {
  std::shared_ptr<Backend> backend;
  Backends roles() const { return Backends::all(*backend); }
};

BackendSet make_backends(const Flags& f, const RunConfig& config) {
  if (!f.script.empty() && !f.replay.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "--script and --replay are exclusive");
  }
  BackendSet set;
  if (!f.script.empty()) {
    set.backend = std::make_shared<ScriptedBackend>(
        ScriptedBackend::parse_script(read_file_bytes(f.script), f.script));
  } else if (!f.replay.empty()) {
    set.backend = std::make_shared<ReplayBackend>(
        f.replay, config.concurrency_limit > 1 ? ReplayBackend::Mode::kKeyed
                                               : ReplayBackend::Mode::kOrdered);
  } else {
    set.backend = HttpBackend::from_environment();
  }
  if (!f.record.empty()) set.backend = std::make_shared<RecordingBackend>(set.backend, f.record);
  return set;
}

struct Session {
  std::unique_ptr<Workspace> workspace;
  ProjectSpec spec;
  RunConfig config;
  BackendSet backends;
  std::unique_ptr<Orchestrator> orchestrator;
};

Session open_session(const Flags& f, bool needs_backend) {
  Session s;
  s.workspace = std::make_unique<Workspace>(Workspace::open(f.workspace));
  s.spec = s.workspace->load_project();
  s.config = config_override(f).value_or(s.spec.config);
  if (needs_backend) {
    s.backends = make_backends(f, s.config);
  } else {
    s.backends.backend = std::make_shared<ScriptedBackend>(std::vector<ScriptEntry>{});
  }
  s.orchestrator = std::make_unique<Orchestrator>(
      *s.workspace, Journal::open(s.workspace->journal_path(), s.config.sync_journal),
      s.backends.roles(), s.config);
  return s;
}

std::unique_ptr<InteractionChannel> make_channel(const Flags& f, const RunConfig& config,
                                                 std::istream& in, std::ostream& out) {
  if (!f.answer_file.empty()) {
    std::ifstream file(f.answer_file);
    if (!file) throw Error(ErrorCode::kNotFound, "cannot read answer file " + f.answer_file);
    std::stringstream ss;
    ss << file.rdbuf();
    return std::make_unique<AnswerFileChannel>(parse_json(ss.str(), "answer file"));
  }
  if (f.yes) return std::make_unique<UnattendedChannel>(config.unattended_wait);
  return std::make_unique<StreamChannel>(in, out);
}

void print_plan(const Plan& plan, std::ostream& out) {
  out << "plan version " << plan.version << ": " << plan.goal << "\n";
  for (const auto& t : plan.tasks) {
    out << "  " << t.task_id.value << ". " << t.title;
    if (!t.dependencies.empty()) {
      std::string deps;
      for (TaskId d : t.dependencies) deps += (deps.empty() ? "" : ", ") + to_string(d);
      out << " (after " << deps << ")";
    }
    if (t.expensive) out << " [expensive]";
    out << "\n";
  }
}

bool confirm(const Flags& f, const std::string& question, std::istream& in, std::ostream& out) {
  if (f.yes) return true;
  out << question << " [y/N] " << std::flush;
  std::string line;
  if (!std::getline(in, line)) return false;
  return line == "y" || line == "Y" || line == "yes";
}

void print_progress(const Event& e, std::ostream& out) {
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, event::TaskDispatched>) {
          out << "task " << p.task_id.value << " dispatched (attempt " << p.attempt << ")\n";
        } else if constexpr (std::is_same_v<P, event::VerdictIssued>) {
          out << "task " << p.task_id.value << " " << to_string(p.scope) << " verdict "
              << verdict_kind(p.verdict) << (p.escalated ? " (escalated)" : "") << "\n";
        } else if constexpr (std::is_same_v<P, event::TasksInvalidated>) {
          std::string ids;
          for (TaskId id : p.tasks) ids += (ids.empty() ? "" : ", ") + to_string(id);
          out << "invalidated " << ids << "\n";
        } else if constexpr (std::is_same_v<P, event::AttemptAbandoned>) {
          out << "task " << p.task_id.value << " attempt " << p.attempt << " abandoned: " << p.reason
              << "\n";
        }
      },
      e.payload);
  out << std::flush;
}

int report(const RunOutcome& outcome, std::ostream& out, std::ostream& err) {
  switch (outcome.status) {
    case RunStatus::kCompleted:
      out << "Completed\n";
      return 0;
    case RunStatus::kHalted:
      out << "Halted: " << (outcome.halt ? outcome.halt->reason : outcome.detail) << "\n";
      return 2;
    case RunStatus::kFatal:
      err << "steward: " << outcome.detail << "\n";
      return 1;
  }
  return 1;
}

// ---------------------------------------------------------------------------

int cmd_init(const Flags& f, std::ostream& out) {
  std::string instruction = f.instruction;
  if (!f.instruction_file.empty()) {
    std::ifstream in(f.instruction_file);
    if (!in) throw Error(ErrorCode::kNotFound, "cannot read " + f.instruction_file);
    std::stringstream ss;
    ss << in.rdbuf();
    instruction = ss.str();
  }
  ProjectSpec spec;
  spec.instruction = instruction;
  spec.config = config_override(f).value_or(RunConfig{});
  spec.config.api_token.clear();
  spec.project_id = f.project_id;
  if (spec.project_id.empty()) {
    spec.project_id = fs::absolute(f.workspace).lexically_normal().filename().string();
    if (spec.project_id.empty()) spec.project_id = "project";
  }
  for (const auto& a : f.attachments) {
    if (!fs::is_regular_file(a)) throw Error(ErrorCode::kNotFound, "attachment not found: " + a);
    spec.attachments.push_back({"shared/" + fs::path(a).filename().string(), fs::file_size(a)});
  }
  if (auto problems = validate_project_spec(spec); !problems.empty()) {
    throw Error(ErrorCode::kInvalidArgument, problems.front());
  }
  Workspace ws = Workspace::init(f.workspace);
  for (std::size_t i = 0; i < f.attachments.size(); ++i) {
    fs::copy_file(f.attachments[i], ws.resolve(spec.attachments[i].path));
  }
  ws.save_project(spec);
  Journal::create(ws.journal_path(), spec.project_id, spec.config.sync_journal);
  out << "initialized project " << spec.project_id << " in " << ws.root().string() << "\n";
  return 0;
}

int cmd_plan(const Flags& f, std::istream& in, std::ostream& out) {
  Session s = open_session(f, f.plan_file.empty());
  if (!f.plan_file.empty()) {
    std::ifstream file(f.plan_file);
    if (!file) throw Error(ErrorCode::kNotFound, "cannot read " + f.plan_file);
    std::stringstream ss;
    ss << file.rdbuf();
    Plan plan = decode<Plan>(parse_json(ss.str(), "plan file"), "plan file");
    const ProjectState st = s.orchestrator->state();
    if (st.approved()) throw Error(ErrorCode::kFailedPrecondition, "plan already approved");
    plan.version = st.latest_version + 1;
    if (auto report = validate_plan(plan); !report.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "invalid plan: " + render(report));
    }
    s.orchestrator->propose(plan);
    print_plan(plan, out);
    return 0;
  }
  auto channel = make_channel(f, s.config, in, out);
  PlanningSession session = s.orchestrator->plan(s.spec, *channel);
  if (!session.succeeded()) {
    throw Error(ErrorCode::kCancelled,
                "planning abandoned: " + std::get<Abandoned>(session.outcome).reason);
  }
  print_plan(session.plan(), out);
  out << "approve with: steward approve --version " << session.plan().version << "\n";
  return 0;
}

int cmd_approve(const Flags& f, std::istream& in, std::ostream& out, std::ostream& err) {
  Session s = open_session(f, false);
  const ProjectState st = s.orchestrator->state();
  int version = f.version;
  if (version == 0) {
    if (!st.proposed) {
      if (st.approved()) {
        err << "warning: plan version " << st.approved_version << " is already approved\n";
        return 0;
      }
      throw Error(ErrorCode::kFailedPrecondition, "no plan awaits approval");
    }
    version = st.proposed->version;
  }
  Decision decision = f.reject ? Decision::kReject : Decision::kApprove;
  std::string comment = f.comment;
  if (!f.reject && !f.yes && st.proposed && st.proposed->version == version) {
    print_plan(*st.proposed, out);
    if (!confirm(f, "approve plan version " + std::to_string(version) + "?", in, out)) {
      decision = Decision::kReject;
      if (comment.empty()) {
        out << "comment for the planner (optional): " << std::flush;
        std::getline(in, comment);
      }
    }
  }
  ApprovalOutcome outcome = s.orchestrator->decide(version, decision, f.actor, comment);
  if (!outcome.event) {
    err << "warning: " << outcome.warning << "\n";
    return 0;
  }
  if (decision == Decision::kReject) {
    out << "plan version " << version << " rejected\n";
    return 0;
  }
  out << "plan version " << version << " approved\n";
  if (s.orchestrator->state().halt == std::nullopt && st.halt) out << "project resumed\n";
  return 0;
}

int run_with_interrupts(Orchestrator& o, RunOutcome& outcome) {
  std::atomic<bool> done{false};
  const int base = g_interrupts.load();
  std::thread watcher([&] {
    bool requested = false;
    while (!done) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
      const int n = g_interrupts.load() - base;
      if (n >= 1 && !requested) {
        o.request_halt("interrupted by operator", "operator");
        requested = true;
      }
      if (n >= 2) std::_Exit(130);
    }
  });
  try {
    outcome = o.run();
  } catch (...) {
    done = true;
    watcher.join();
    throw;
  }
  done = true;
  watcher.join();
  return 0;
}

int cmd_run(const Flags& f, std::ostream& out, std::ostream& err) {
  if (!f.listen.empty()) {
    const auto [host, port] = parse_listen_address(f.listen);
    auto override_config = config_override(f);
    Workspace probe = Workspace::open(f.workspace);
    const RunConfig config = override_config.value_or(probe.load_project().config);
    BackendSet backends = make_backends(f, config);
    ProjectHost::Options ho;
    ho.backends = backends.roles();
    ho.config = override_config;
    auto project = std::make_shared<ProjectHost>(f.workspace, ho);
    if (!project->writable()) {
      throw Error(ErrorCode::kConflict, "journal is held by another engine instance");
    }
    if (!project->state().approved()) throw Error(ErrorCode::kFailedPrecondition, "plan not approved");
    ApiServer::Options so;
    so.token = api_token(config);
    ApiServer server(so);
    server.add(project);
    const int bound = server.start(host, port);
    out << "listening on " << host << ":" << bound << "\n" << std::flush;
    project->start_run();
    // Serves until the project completes or the operator interrupts; a halted
    // project stays up so it can be resumed through the API.
    const int base = g_interrupts.load();
    while (g_interrupts.load() == base) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
      if (!project->running() && project->state().completed) break;
    }
    if (project->running()) project->orchestrator()->request_halt("interrupted by operator");
    auto outcome = project->wait_run();
    server.stop();
    if (!outcome) {
      RunOutcome o;
      const ProjectState st = project->state();
      o.status = st.completed ? RunStatus::kCompleted : RunStatus::kHalted;
      o.halt = st.halt;
      outcome = o;
    }
    return report(*outcome, out, err);
  }
  Session s = open_session(f, true);
  s.orchestrator->set_listener([&out](const Event& e, const std::string&) { print_progress(e, out); });
  RunOutcome outcome;
  run_with_interrupts(*s.orchestrator, outcome);
  return report(outcome, out, err);
}

int cmd_status(const Flags& f, std::ostream& out) {
  Workspace ws = Workspace::open(f.workspace);
  JournalContents contents;
  for (int tries = 0;; ++tries) {
    try {
      contents = Journal::read(ws.journal_path());
      break;
    } catch (const Error& e) {
      // A concurrent writer may be mid-record.
      if (e.code() != ErrorCode::kCorruptJournal || tries >= 5) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
  }
  const json snap = api_snapshot(contents.project_id, fold_state(contents.events));
  out << (f.json_output ? snap.dump(2) + "\n" : render_status(snap));
  return 0;
}

int cmd_replay(const Flags& f, std::ostream& out) {
  const fs::path path =
      f.journal_file.empty() ? Workspace::open(f.workspace).journal_path() : fs::path(f.journal_file);
  JournalContents contents = Journal::read(path);
  const json snap = api_snapshot(contents.project_id, fold_state(contents.events));
  out << (f.json_output ? snap.dump(2) + "\n" : render_status(snap));
  return 0;
}

int cmd_halt(const Flags& f, std::ostream& out) {
  try {
    Session s = open_session(f, false);
    s.orchestrator->halt(f.reason, "operator");
    out << "Halted: " << f.reason << "\n";
    return 0;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kConflict) throw;
  }
  // A run holds the journal; it picks the request up at its next tick.
  Workspace ws = Workspace::open(f.workspace);
  const JournalContents contents = Journal::read(ws.journal_path());
  const ProjectState st = fold_state(contents.events);
  if (st.halt) throw Error(ErrorCode::kFailedPrecondition, "project is already halted");
  if (st.completed) throw Error(ErrorCode::kFailedPrecondition, "project is completed");
  write_halt_request(ws, f.reason);
  out << "halt requested; the running engine will stop\n";
  return 0;
}

int cmd_resume(const Flags& f, std::istream& in, std::ostream& out) {
  Session s = open_session(f, !f.instruction.empty());
  ProjectState st = s.orchestrator->state();
  if (!st.halt) throw Error(ErrorCode::kFailedPrecondition, "project is not halted");
  int version = 0;
  if (st.proposed && st.proposed_resume_instruction) {
    version = st.proposed->version;  // an earlier resume still awaits approval
  } else {
    s.orchestrator->propose_resume(f.instruction);
    st = s.orchestrator->state();
    version = st.proposed->version;
  }
  print_plan(*st.proposed, out);
  if (!confirm(f, "approve plan version " + std::to_string(version) + " and resume?", in, out)) {
    out << "plan version " << version << " awaits approval\n";
    return 1;
  }
  s.orchestrator->decide(version, Decision::kApprove, f.actor);
  out << "resumed at plan version " << version << "; continue with: steward run\n";
  return 0;
}

int cmd_inspect(const Flags& f, std::ostream& out) {
  Workspace ws = Workspace::open(f.workspace);
  const JournalContents contents = Journal::read(ws.journal_path());
  out << task_detail(ws, fold_state(contents.events), contents.events, TaskId(f.task)).dump(2)
      << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv, std::istream& in, std::ostream& out, std::ostream& err) {
  Flags f;
  CLI::App app{"steward: plans, runs and supervises multi-task agent projects"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.add_option("-w,--workspace", f.workspace, "Project workspace directory");
  app.add_option("--config", f.config, "Run configuration JSON");
  app.add_flag("-y,--yes", f.yes, "Answer confirmations and planner questions unattended");
  app.add_option("--answer-file", f.answer_file, "JSON answers for planner questions");
  app.add_option("--script", f.script, "Scripted model responses (JSON lines)");
  app.add_option("--record", f.record, "Record model exchanges to this transcript");
  app.add_option("--replay", f.replay, "Replay model exchanges from this transcript");

  auto* init = app.add_subcommand("init", "Create a workspace for a new project");
  init->add_option("-i,--instruction", f.instruction, "Project instruction");
  init->add_option("--instruction-file", f.instruction_file, "Read the instruction from a file");
  init->add_option("--project-id", f.project_id, "Project id (default: directory name)");
  init->add_option("--attach", f.attachments, "Files copied into shared/");

  auto* plan = app.add_subcommand("plan", "Ask the planner for a plan, or propose one from a file");
  plan->add_option("--file", f.plan_file, "Propose this plan JSON instead of running the planner");

  auto* approve = app.add_subcommand("approve", "Approve or reject a proposed plan");
  approve->add_option("--version", f.version, "Plan version (default: the proposed one)");
  approve->add_flag("--reject", f.reject, "Reject instead of approving");
  approve->add_option("--comment", f.comment, "Comment handed to the planner on rejection");
  approve->add_option("--actor", f.actor, "Who decided");

  auto* run = app.add_subcommand("run", "Run the approved plan until completed or halted");
  run->add_option("--listen", f.listen, "Serve the HTTP API on host:port while running");

  auto* status = app.add_subcommand("status", "Show project state");
  status->add_flag("--json", f.json_output, "Print the snapshot as JSON");

  auto* halt = app.add_subcommand("halt", "Halt the project");
  halt->add_option("--reason", f.reason, "Recorded halt reason");

  auto* resume = app.add_subcommand("resume", "Propose and approve a plan to continue a halted project");
  resume->add_option("--instruction", f.instruction, "New instruction for the planner");
  resume->add_option("--actor", f.actor, "Who approved");

  auto* inspect = app.add_subcommand("inspect", "Show one task's record, events and files");
  inspect->add_option("task", f.task, "Task id")->required();

  auto* replay = app.add_subcommand("replay", "Fold a journal and print the derived state");
  replay->add_option("--journal", f.journal_file, "Journal file (default: the workspace's)");
  replay->add_flag("--json", f.json_output, "Print the snapshot as JSON");

  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "steward: " << e.what() << "\n";
    return 1;
  }

  try {
    if (init->parsed()) return cmd_init(f, out);
    if (plan->parsed()) return cmd_plan(f, in, out);
    if (approve->parsed()) return cmd_approve(f, in, out, err);
    if (run->parsed()) return cmd_run(f, out, err);
    if (status->parsed()) return cmd_status(f, out);
    if (halt->parsed()) return cmd_halt(f, out);
    if (resume->parsed()) return cmd_resume(f, in, out);
    if (inspect->parsed()) return cmd_inspect(f, out);
    if (replay->parsed()) return cmd_replay(f, out);
  } catch (const std::exception& e) {
    err << "steward: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

void install_interrupt_handlers() {
  struct sigaction sa {};
  sa.sa_handler = on_interrupt;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGINT, &sa, nullptr);
  ::sigaction(SIGTERM, &sa, nullptr);
}

}  // namespace steward
