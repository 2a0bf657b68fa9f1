#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include <httplib.h>

#include "fixtures.hpp"
#include "steward/serialize.hpp"
#include "steward/service.hpp"

using namespace steward;
using namespace steward::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args, const std::string& input = {}) {
  args.insert(args.begin(), "steward");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::istringstream in(input);
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path write_config(const fs::path& dir, json overrides = json::object()) {
  json c = fast_config();
  for (auto& [k, v] : overrides.items()) c[k] = v;
  const fs::path p = dir / "config.json";
  std::ofstream(p) << c.dump();
  return p;
}

std::vector<Event> journal_events(const Workspace& ws) {
  return Journal::read(ws.journal_path()).events;
}

template <typename T>
int count_of(const std::vector<Event>& events) {
  int n = 0;
  for (const auto& e : events) n += std::holds_alternative<T>(e.payload) ? 1 : 0;
  return n;
}

// SSE frames of one response: (event name, data) pairs.
std::vector<std::pair<std::string, std::string>> sse_frames(const std::string& body) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(body);
  std::string line, name, data;
  while (std::getline(in, line)) {
    if (line.starts_with("event: ")) name = line.substr(7);
    if (line.starts_with("data: ")) data = line.substr(6);
    if (line.empty() && !name.empty()) {
      out.emplace_back(name, data);
      name.clear();
      data.clear();
    }
  }
  return out;
}

class ServiceTest : public ::testing::Test {
 protected:
  TempDir dir{"steward-svc"};
  fs::path ws_path = dir.path() / "ws";

  void init_cli(const std::string& id, const json& config = json::object()) {
    const fs::path cfg = write_config(dir.path(), config);
    auto r = cli({"init", "--workspace", ws_path.string(), "--config", cfg.string(), "--project-id",
                  id, "--instruction", "Derive the reported quantities from the supplied data."});
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

}  // namespace

TEST_F(ServiceTest, CliLifecycleCompletesTwelveTaskFixture) {
  const FixtureProject fx = polymer_fixture();
  init_cli(fx.name);
  const fs::path script = dir.path() / "script.jsonl";
  Script().planner(fx.plan).default_worker().default_assessor().save(script);
  const std::string w = ws_path.string();

  auto plan = cli({"plan", "--workspace", w, "--script", script.string(), "--yes"});
  ASSERT_EQ(plan.code, 0) << plan.err;
  EXPECT_NE(plan.out.find("plan version 1"), std::string::npos);

  auto approve = cli({"approve", "--workspace", w, "--yes"});
  ASSERT_EQ(approve.code, 0) << approve.err;

  auto run = cli({"run", "--workspace", w, "--script", script.string()});
  ASSERT_EQ(run.code, 0) << run.err;
  EXPECT_NE(run.out.find("Completed"), std::string::npos);

  auto status = cli({"status", "--workspace", w});
  auto replay = cli({"replay", "--journal", (ws_path / "journal" / "events.jsonl").string(),
                     "--workspace", w});
  ASSERT_EQ(status.code, 0);
  ASSERT_EQ(replay.code, 0);
  EXPECT_EQ(status.out, replay.out);
  EXPECT_NE(status.out.find("status   completed"), std::string::npos);

  auto snap = json::parse(cli({"status", "--json", "--workspace", w}).out);
  EXPECT_EQ(snap.at("tasks").size(), 12u);
  for (const auto& t : snap.at("tasks")) EXPECT_EQ(t.at("state"), "Accepted");
}

TEST_F(ServiceTest, RunBeforeApproveIsRefused) {
  init_cli("early");
  const fs::path script = dir.path() / "script.jsonl";
  Script().planner(chain_plan(3)).default_worker().default_assessor().save(script);
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--script", script.string(), "--yes"}).code, 0);
  auto run = cli({"run", "--workspace", w, "--script", script.string()});
  EXPECT_NE(run.code, 0);
  EXPECT_EQ(run.err, "steward: plan not approved\n");
}

TEST_F(ServiceTest, WrongStateCommandsExitNonzeroWithOneLine) {
  init_cli("wrong");
  const std::string w = ws_path.string();
  for (auto args : std::vector<std::vector<std::string>>{
           {"halt", "--workspace", w},
           {"resume", "--workspace", w, "--yes"},
           {"inspect", "4", "--workspace", w},
           {"approve", "--workspace", w, "--yes"}}) {
    auto r = cli(args);
    EXPECT_EQ(r.code, 1) << args[0];
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  }
  auto again = cli({"init", "--workspace", w, "--instruction", "x"});
  EXPECT_EQ(again.code, 1);
}

TEST_F(ServiceTest, RejectCarriesCommentIntoNextRound) {
  init_cli("reject");
  const fs::path script = dir.path() / "script.jsonl";
  Script().planner(chain_plan(2)).save(script);
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--script", script.string(), "--yes"}).code, 0);
  auto rej = cli({"approve", "--workspace", w, "--reject", "--comment", "split task 2"});
  ASSERT_EQ(rej.code, 0) << rej.err;
  EXPECT_NE(rej.out.find("rejected"), std::string::npos);
  ASSERT_EQ(cli({"plan", "--workspace", w, "--script", script.string(), "--yes"}).code, 0);
  auto snap = json::parse(cli({"status", "--json", "--workspace", w}).out);
  EXPECT_EQ(snap.at("proposed_version"), 2);
  EXPECT_EQ(snap.at("status"), "awaiting_approval");
}

TEST_F(ServiceTest, InteractiveApprovalReadsTheAnswer) {
  init_cli("interactive");
  const fs::path plan_file = dir.path() / "plan.json";
  std::ofstream(plan_file) << json(chain_plan(2)).dump();
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--file", plan_file.string()}).code, 0);
  auto declined = cli({"approve", "--workspace", w}, "n\nneeds a validation task\n");
  ASSERT_EQ(declined.code, 0) << declined.err;
  EXPECT_NE(declined.out.find("rejected"), std::string::npos);
  ASSERT_EQ(cli({"plan", "--workspace", w, "--file", plan_file.string()}).code, 0);
  auto accepted = cli({"approve", "--workspace", w}, "y\n");
  ASSERT_EQ(accepted.code, 0);
  EXPECT_NE(accepted.out.find("plan version 2 approved"), std::string::npos);
  auto events = journal_events(Workspace::open(ws_path));
  ASSERT_EQ(count_of<event::PlanRejected>(events), 1);
  for (const auto& e : events) {
    if (auto* r = std::get_if<event::PlanRejected>(&e.payload)) {
      EXPECT_EQ(r->comment, "needs a validation task");
    }
  }
}

TEST_F(ServiceTest, HaltResumeAndInspectThroughCli) {
  init_cli("cycle");
  const fs::path script = dir.path() / "script.jsonl";
  Script()
      .planner(chain_plan(4))
      .default_worker()
      .default_assessor()
      .verdict(3, 1, {{"kind", "halt"}, {"reason", "input table is truncated"}})
      .save(script);
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--script", script.string(), "--yes"}).code, 0);
  ASSERT_EQ(cli({"approve", "--workspace", w, "--yes"}).code, 0);
  auto first = cli({"run", "--workspace", w, "--script", script.string()});
  EXPECT_EQ(first.code, 2);
  EXPECT_NE(first.out.find("Halted: input table is truncated"), std::string::npos);

  auto resume = cli({"resume", "--workspace", w, "--yes"});
  ASSERT_EQ(resume.code, 0) << resume.err;
  auto second = cli({"run", "--workspace", w, "--script", script.string()});
  ASSERT_EQ(second.code, 0) << second.err;

  auto detail = json::parse(cli({"inspect", "3", "--workspace", w}).out);
  EXPECT_EQ(detail.at("record").at("state").at("kind"), "Accepted");
  EXPECT_EQ(detail.at("transcripts").size(), 2u);
  EXPECT_EQ(detail.at("assessments").size(), 2u);
  EXPECT_FALSE(detail.at("summary").is_null());
}

TEST_F(ServiceTest, HaltWhileIdleJournalsDirectly) {
  init_cli("idle");
  const fs::path plan_file = dir.path() / "plan.json";
  std::ofstream(plan_file) << json(chain_plan(3)).dump();
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--file", plan_file.string()}).code, 0);
  ASSERT_EQ(cli({"approve", "--workspace", w, "--yes"}).code, 0);
  auto h = cli({"halt", "--workspace", w, "--reason", "budget review"});
  ASSERT_EQ(h.code, 0) << h.err;
  auto snap = json::parse(cli({"status", "--json", "--workspace", w}).out);
  EXPECT_EQ(snap.at("halt").at("reason"), "budget review");
  EXPECT_EQ(snap.at("halt").at("frontier"), json::array({1}));
  EXPECT_EQ(cli({"halt", "--workspace", w}).code, 1);
}

TEST_F(ServiceTest, HaltWhileAnotherProcessRunsWritesRequest) {
  init_cli("busy");
  const fs::path plan_file = dir.path() / "plan.json";
  std::ofstream(plan_file) << json(chain_plan(3)).dump();
  const std::string w = ws_path.string();
  ASSERT_EQ(cli({"plan", "--workspace", w, "--file", plan_file.string()}).code, 0);
  ASSERT_EQ(cli({"approve", "--workspace", w, "--yes"}).code, 0);
  Workspace ws = Workspace::open(ws_path);
  Journal held = Journal::open(ws.journal_path(), false);
  auto h = cli({"halt", "--workspace", w, "--reason", "stop now"});
  ASSERT_EQ(h.code, 0) << h.err;
  EXPECT_TRUE(fs::exists(halt_request_path(ws)));
}

// ---------------------------------------------------------------------------
// HTTP API

namespace {

struct Served {
  std::shared_ptr<ProjectHost> host;
  std::unique_ptr<ApiServer> server;
  std::unique_ptr<httplib::Client> client;
};

Served serve(const fs::path& root, Backend& backend, const std::string& token = {},
             bool auto_run = true) {
  Served s;
  ProjectHost::Options ho;
  ho.backends = Backends::all(backend);
  ho.config = fast_config();
  ho.orchestrator.idle_poll = std::chrono::milliseconds(20);
  ho.auto_run = auto_run;
  s.host = std::make_shared<ProjectHost>(root, ho);
  ApiServer::Options so;
  so.token = token;
  so.stream_poll = std::chrono::milliseconds(50);
  s.server = std::make_unique<ApiServer>(so);
  s.server->add(s.host);
  const int port = s.server->start("127.0.0.1", 0);
  s.client = std::make_unique<httplib::Client>("127.0.0.1", port);
  s.client->set_read_timeout(30, 0);
  if (!token.empty()) s.client->set_bearer_token_auth(token);
  return s;
}

json post(httplib::Client& c, const std::string& path, const json& body, int* status = nullptr) {
  auto res = c.Post(path, body.dump(), "application/json");
  if (!res) throw std::runtime_error("no response for " + path);
  if (status) *status = res->status;
  return json::parse(res->body);
}

json get(httplib::Client& c, const std::string& path, int* status = nullptr) {
  auto res = c.Get(path);
  if (!res) throw std::runtime_error("no response for " + path);
  if (status) *status = res->status;
  return json::parse(res->body);
}

std::vector<std::string> stream_events(httplib::Client& c, const std::string& project,
                                       std::uint64_t from, bool* ended = nullptr) {
  auto res = c.Get("/api/projects/" + project + "/events?from=" + std::to_string(from));
  if (!res) throw std::runtime_error("stream failed");
  std::vector<std::string> out;
  if (ended) *ended = false;
  for (auto& [name, data] : sse_frames(res->body)) {
    if (name == "event") out.push_back(data);
    if (name == "end" && ended) *ended = true;
  }
  return out;
}

Project completed_project(const fs::path& root, int tasks) {
  Project p = init_project(root, ProjectSpec{"done", "Finish the tasks.", {}, fast_config()},
                           chain_plan(tasks));
  ScriptedBackend backend(Script().default_worker().default_assessor().entries());
  auto orch = open_orchestrator(*p.workspace, Backends::all(backend), fast_config());
  EXPECT_EQ(orch->run().status, RunStatus::kCompleted);
  return p;
}

}  // namespace

TEST(Api, StreamOfFinishedJournalDeliversEveryEventThenEnds) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 4);
  const auto lines = Journal::read(p.workspace->journal_path()).lines;
  ScriptedBackend none({});
  Served s = serve(p.root, none);
  bool ended = false;
  auto got = stream_events(*s.client, "done", 0, &ended);
  EXPECT_TRUE(ended);
  EXPECT_EQ(got, lines);
  EXPECT_GE(got.size(), 20u);
}

TEST(Api, StreamIsResumableAtEverySplit) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 3);
  ScriptedBackend none({});
  Served s = serve(p.root, none);
  const auto all = stream_events(*s.client, "done", 0);
  std::mt19937 rng(7);
  for (int i = 0; i < 8; ++i) {
    const std::uint64_t split = std::uniform_int_distribution<std::uint64_t>(0, all.size())(rng);
    auto head = all;
    head.resize(split);
    auto tail = stream_events(*s.client, "done", split);
    head.insert(head.end(), tail.begin(), tail.end());
    EXPECT_EQ(head, all) << "split " << split;
  }
  auto poll = get(*s.client, "/api/projects/done/events?from=5&format=json");
  EXPECT_EQ(poll.at("events").size(), all.size() - 5);
  EXPECT_TRUE(poll.at("end").get<bool>());
}

TEST(Api, GetsAreFunctionsOfTheJournal) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 3);
  ScriptedBackend none({});
  Served s = serve(p.root, none);
  const auto contents = Journal::read(p.workspace->journal_path());
  const ProjectState folded = fold_state(contents.events);
  EXPECT_EQ(get(*s.client, "/api/projects/done"), api_snapshot("done", folded));
  EXPECT_EQ(get(*s.client, "/api/projects/done/tasks/2"),
            task_detail(*p.workspace, folded, contents.events, TaskId(2)));
  auto plan = get(*s.client, "/api/projects/done/plan/1");
  EXPECT_EQ(plan.at("status"), "approved");
  EXPECT_EQ(plan.at("plan").at("tasks").size(), 3u);
  auto list = get(*s.client, "/api/projects");
  ASSERT_EQ(list.at("projects").size(), 1u);
  EXPECT_EQ(list.at("projects")[0].at("status"), "completed");
}

TEST(Api, UnknownProjectAndTaskAreNotFound) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 2);
  ScriptedBackend none({});
  Served s = serve(p.root, none);
  int status = 0;
  get(*s.client, "/api/projects/nope", &status);
  EXPECT_EQ(status, 404);
  get(*s.client, "/api/projects/done/tasks/9", &status);
  EXPECT_EQ(status, 404);
  get(*s.client, "/api/projects/done/plan/4", &status);
  EXPECT_EQ(status, 404);
  post(*s.client, "/api/projects/nope/approve", json::object(), &status);
  EXPECT_EQ(status, 404);
}

TEST(Api, BearerTokenIsRequiredWhenConfigured) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 2);
  ScriptedBackend none({});
  Served s = serve(p.root, none, "s3cret");
  int status = 0;
  get(*s.client, "/api/projects", &status);
  EXPECT_EQ(status, 200);
  httplib::Client anon("127.0.0.1", s.server->port());
  auto res = anon.Get("/api/projects");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 401);
}

TEST(Api, ApproveIsIdempotentByRequestId) {
  TempDir dir;
  const fs::path root = dir.path() / "ws";
  {
    Workspace ws = Workspace::init(root);
    ws.save_project(ProjectSpec{"idem", "Do it.", {}, fast_config()});
    Journal::create(ws.journal_path(), "idem", false);
    ScriptedBackend none({});
    auto orch = open_orchestrator(ws, Backends::all(none), fast_config());
    orch->propose(chain_plan(2));
  }
  ScriptedBackend none({});
  Served s = serve(root, none, {}, /*auto_run=*/false);
  int st1 = 0, st2 = 0, st3 = 0;
  json a = post(*s.client, "/api/projects/idem/approve", {{"version", 1}, {"request_id", "r-1"}}, &st1);
  json b = post(*s.client, "/api/projects/idem/approve", {{"version", 1}, {"request_id", "r-1"}}, &st2);
  EXPECT_EQ(st1, 200);
  EXPECT_EQ(st2, 200);
  EXPECT_EQ(a, b);
  post(*s.client, "/api/projects/idem/approve", {{"version", 1}, {"request_id", "r-2"}}, &st3);
  EXPECT_EQ(st3, 409);
  EXPECT_EQ(count_of<event::PlanApproved>(journal_events(s.host->workspace())), 1);
}

TEST(Api, ResumeMidHaltThenStreamShowsResumeAndNewDispatches) {
  TempDir dir;
  Project p = init_project(dir.path() / "ws", ProjectSpec{"mid", "Run it.", {}, fast_config()},
                           chain_plan(4));
  ScriptedBackend backend(Script()
                              .default_worker()
                              .default_assessor()
                              .verdict(2, 1, {{"kind", "halt"}, {"reason", "calibration is off"}})
                              .entries());
  p.workspace.reset();
  Served s = serve(p.root, backend);
  ASSERT_TRUE(s.host->start_run());
  auto first = s.host->wait_run();
  ASSERT_TRUE(first);
  ASSERT_EQ(first->status, RunStatus::kHalted);
  const std::uint64_t halted_at = s.host->state().last_sequence_no;

  int status = 0;
  json resumed = post(*s.client, "/api/projects/mid/resume", {{"instruction", ""}, {"request_id", "x"}},
                      &status);
  ASSERT_EQ(status, 200) << resumed.dump();
  json approved = post(*s.client, "/api/projects/mid/approve", {{"request_id", "y"}}, &status);
  ASSERT_EQ(status, 200) << approved.dump();
  EXPECT_TRUE(approved.at("run_started").get<bool>());

  bool ended = false;
  auto tail = stream_events(*s.client, "mid", halted_at, &ended);
  EXPECT_TRUE(ended);
  std::vector<std::string> types;
  for (const auto& l : tail) types.push_back(json::parse(l).at("type"));
  ASSERT_GE(types.size(), 4u);
  EXPECT_EQ(types[0], "PlanProposed");
  EXPECT_EQ(types[1], "PlanApproved");
  EXPECT_EQ(types[2], "ProjectResumed");
  EXPECT_EQ(types[3], "TaskDispatched");
  EXPECT_EQ(types.back(), "ProjectCompleted");
  EXPECT_EQ(s.host->last_outcome()->status, RunStatus::kCompleted);
}

TEST(Api, HaltDuringRunIsRequestedThenJournaled) {
  TempDir dir;
  Project p = init_project(dir.path() / "ws", ProjectSpec{"slow", "Run it.", {}, fast_config()},
                           independent_plan(2));
  ScriptedBackend backend(Script().default_worker("sleep 30").default_assessor().entries());
  p.workspace.reset();
  Served s = serve(p.root, backend);
  ASSERT_TRUE(s.host->start_run());
  auto live = get(*s.client, "/api/projects");
  EXPECT_TRUE(live.at("projects")[0].at("running").get<bool>());
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  int status = 0;
  json r = post(*s.client, "/api/projects/slow/halt", {{"reason", "operator pause"}}, &status);
  EXPECT_EQ(status, 202) << r.dump();
  auto outcome = s.host->wait_run();
  ASSERT_TRUE(outcome);
  EXPECT_EQ(outcome->status, RunStatus::kHalted);
  EXPECT_EQ(s.host->state().halt->reason, "operator pause");
  EXPECT_EQ(s.host->state().halt->issued_by, "operator");
}

TEST(Api, HostIsReadOnlyWhileAnotherWriterHoldsTheJournal) {
  TempDir dir;
  Project p = completed_project(dir.path() / "ws", 2);
  Journal held = Journal::open(p.workspace->journal_path(), false);
  ScriptedBackend none({});
  Served s = serve(p.root, none);
  EXPECT_FALSE(s.host->writable());
  int status = 0;
  post(*s.client, "/api/projects/done/approve", {{"version", 1}}, &status);
  EXPECT_EQ(status, 409);
  EXPECT_EQ(get(*s.client, "/api/projects/done").at("status"), "completed");
}

TEST(Api, ListenAddressParsing) {
  EXPECT_EQ(parse_listen_address("0.0.0.0:8080"), std::make_pair(std::string("0.0.0.0"), 8080));
  EXPECT_EQ(parse_listen_address(":9000"), std::make_pair(std::string("127.0.0.1"), 9000));
  EXPECT_EQ(parse_listen_address("7000"), std::make_pair(std::string("127.0.0.1"), 7000));
  EXPECT_THROW(parse_listen_address("host:"), Error);
  EXPECT_THROW(parse_listen_address("host:99999"), Error);
}
