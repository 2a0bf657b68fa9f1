#include "steward/worker.hpp"

#include <algorithm>
#include <fstream>

#include "steward/digest.hpp"
#include "steward/error.hpp"
#include "steward/prompt_assets.hpp"
#include "steward/serialize.hpp"

namespace steward {
namespace fs = std::filesystem;

std::string_view to_string(Terminal t) {
  switch (t) {
    case Terminal::kCompleted: return "completed";
    case Terminal::kBudgetExhausted: return "budget_exhausted";
    case Terminal::kToolFatal: return "tool_fatal";
    case Terminal::kCancelled: return "cancelled";
  }
  return "budget_exhausted";
}

TaskBrief assemble_brief(const TaskSpec& task, const Plan& plan, const Workspace& workspace,
                         std::optional<std::string> revise_feedback) {
  for (TaskId dep : task.dependencies) {
    if (plan.find(dep) == nullptr) {
      throw Error(ErrorCode::kIntegrity, "task " + to_string(task.task_id) +
                                             " depends on unknown task " + to_string(dep));
    }
  }
  TaskBrief brief;
  brief.task = task;
  brief.dependency_summaries = workspace.read_dependency_summaries(task);
  brief.task_dir = workspace.task_dir_relative(task.task_id);
  brief.shared_dir = "shared";
  brief.revise_feedback = std::move(revise_feedback);
  return brief;
}

std::string render_brief(const TaskBrief& b) {
  const TaskSpec& t = b.task;
  std::string out = "Task " + to_string(t.task_id) + ": " + t.title + "\n\n";
  out += "Objective:\n" + t.objective + "\n\nSuccess criteria:\n";
  for (const auto& c : t.success_criteria) out += "- " + c + "\n";
  if (!t.expected_artifacts.empty()) {
    out += "\nExpected artifacts:\n";
    for (const auto& a : t.expected_artifacts) out += "- " + a + "\n";
  }
  if (t.hints && !t.hints->empty()) out += "\nHints:\n" + *t.hints + "\n";
  out += "\nTask directory: " + b.task_dir + "\nShared directory: " + b.shared_dir + "\n";
  if (b.dependency_summaries.empty()) {
    out += "\nThis task has no dependencies.\n";
  } else {
    out += "\nSummaries of the tasks this one depends on:\n";
    for (const auto& s : b.dependency_summaries) out += json(s).dump(2) + "\n";
  }
  if (b.revise_feedback) {
    out += "\nFeedback on the previous attempt:\n" + *b.revise_feedback + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Compaction

namespace {

std::size_t message_bytes(const ChatMessage& m) {
  std::size_t n = m.content.size();
  for (const auto& c : m.tool_calls) n += c.name.size() + c.arguments.size();
  return n;
}

std::string one_line(std::string_view s, std::size_t limit) {
  std::string out;
  for (char c : s) {
    if (out.size() >= limit) {
      out += "...";
      break;
    }
    out.push_back(c == '\n' || c == '\r' ? ' ' : c);
  }
  return out;
}

std::string digest_line(int step_no, const std::vector<ChatMessage>& messages) {
  std::string calls;
  std::string last_observation;
  for (const auto& m : messages) {
    for (const auto& c : m.tool_calls) {
      if (!calls.empty()) calls += ",";
      calls += c.name;
    }
    if (m.speaker == Speaker::kTool) last_observation = m.content;
  }
  std::string line = "step " + std::to_string(step_no) + ": ";
  line += calls.empty() ? "no tool call" : calls;
  if (!last_observation.empty()) line += " -> " + one_line(last_observation, 80);
  return line + "\n";
}

constexpr std::string_view kDigestHeader = "[context compacted: earlier steps summarized]\n";

}  // namespace

std::vector<ChatMessage> Transcript::flatten() const {
  std::vector<ChatMessage> out;
  out.push_back(brief);
  if (digest_block) out.push_back(*digest_block);
  for (const auto& step : steps) out.insert(out.end(), step.begin(), step.end());
  return out;
}

std::size_t transcript_bytes(const Transcript& t) {
  std::size_t n = message_bytes(t.brief);
  if (t.digest_block) n += message_bytes(*t.digest_block);
  for (const auto& step : t.steps) {
    for (const auto& m : step) n += message_bytes(m);
  }
  return n;
}

Transcript compact_context(const Transcript& transcript, std::size_t budget, int keep_recent) {
  if (transcript_bytes(transcript) <= budget) return transcript;
  const std::size_t brief_bytes = message_bytes(transcript.brief);
  if (brief_bytes + kDigestHeader.size() > budget) {
    throw Error(ErrorCode::kConfig, "context budget of " + std::to_string(budget) +
                                        " bytes is smaller than the task brief (" +
                                        std::to_string(brief_bytes) + " bytes)");
  }
  const int total = static_cast<int>(transcript.steps.size());
  std::string previous;
  if (transcript.digest_block) {
    previous = transcript.digest_block->content.substr(
        std::min(kDigestHeader.size(), transcript.digest_block->content.size()));
  }
  for (int keep = std::min(keep_recent, total); keep >= 0; --keep) {
    const int cut = total - keep;
    std::string lines = previous;
    for (int i = 0; i < cut; ++i) lines += digest_line(transcript.first_step + i, transcript.steps[i]);

    Transcript out;
    out.brief = transcript.brief;
    out.first_step = transcript.first_step + cut;
    out.steps.assign(transcript.steps.begin() + cut, transcript.steps.end());
    std::size_t kept = brief_bytes;
    for (const auto& step : out.steps) {
      for (const auto& m : step) kept += message_bytes(m);
    }
    if (kept + kDigestHeader.size() > budget) continue;
    // Oldest digest lines go first when the block itself is too large.
    const std::size_t room = budget - kept - kDigestHeader.size();
    if (lines.size() > room) {
      std::size_t drop = lines.size() - room;
      const std::size_t nl = lines.find('\n', drop == 0 ? 0 : drop - 1);
      lines = nl == std::string::npos ? "" : lines.substr(nl + 1);
    }
    out.digest_block = ChatMessage{Speaker::kUser, std::string(kDigestHeader) + lines, {}, {}};
    return out;
  }
  throw Error(ErrorCode::kConfig, "context budget of " + std::to_string(budget) +
                                      " bytes cannot hold the brief and a digest block");
}

// ---------------------------------------------------------------------------
// Tool hosts

namespace {

json object_schema(json properties, std::vector<std::string> required) {
  return json{{"type", "object"}, {"properties", std::move(properties)}, {"required", required}};
}

std::string observation_text(const json& j) { return j.dump(); }

ToolObservation failure(const std::string& message) {
  return ToolObservation{observation_text(json{{"error", message}}), true, false};
}

}  // namespace

ToolSchema task_complete_schema() {
  json summary = object_schema(
      {{"outcome", {{"type", "string"}}},
       {"artifact_index",
        {{"type", "array"},
         {"items", object_schema({{"path", {{"type", "string"}}},
                                  {"description", {{"type", "string"}}}},
                                 {"path"})}}},
       {"usage_notes", {{"type", "string"}}},
       {"data_formats", {{"type", "string"}}},
       {"metrics",
        {{"type", "array"},
         {"items", object_schema({{"name", {{"type", "string"}}},
                                  {"value", {{"type", "number"}}},
                                  {"unit", {{"type", "string"}}}},
                                 {"name", "value"})}}}},
      {"outcome"});
  return ToolSchema{"task_complete",
                    "Finish the task and hand a draft summary to the reviewer.",
                    object_schema({{"summary", summary}}, {"summary"})};
}

std::vector<ToolSchema> ExecutorToolHost::tools() const {
  const json str{{"type", "string"}};
  const json integer{{"type", "integer"}};
  return {
      {"run_command", "Run a shell command and wait for it to finish.",
       object_schema({{"command", str}, {"working_dir", str}, {"timeout_ms", integer}},
                     {"command"})},
      {"read_file", "Read a workspace file, optionally a byte range.",
       object_schema({{"path", str}, {"offset", integer}, {"length", integer}}, {"path"})},
      {"write_file", "Atomically write a workspace file.",
       object_schema({{"path", str}, {"content", str}}, {"path", "content"})},
      {"spawn_job", "Start a long-running command in the background.",
       object_schema({{"command", str}, {"working_dir", str}}, {"command"})},
      {"poll_job", "Check a background job without waiting.",
       object_schema({{"job_id", str}}, {"job_id"})},
      {"kill_job", "Stop a background job.", object_schema({{"job_id", str}}, {"job_id"})},
      {"wait_job", "Wait for a background job to finish, up to a timeout.",
       object_schema({{"job_id", str}, {"timeout_ms", integer}}, {"job_id"})},
  };
}

namespace {

json job_json(const JobHandle& h) {
  json j{{"job_id", h.job_id}, {"status", to_string(h.status)}, {"log", h.log_path}};
  if (h.status != JobState::kRunning) j["exit_code"] = h.exit_code;
  return j;
}

bool job_failed(const JobHandle& h) {
  return h.status == JobState::kKilled || (h.status == JobState::kExited && h.exit_code != 0);
}

}  // namespace

ToolObservation ExecutorToolHost::execute(const ToolCall& call, const ToolContext& ctx) {
  json args;
  try {
    args = json::parse(call.arguments.empty() ? "{}" : call.arguments);
    if (!args.is_object()) return failure("arguments must be a JSON object");
  } catch (const json::exception& e) {
    return failure(std::string("invalid arguments: ") + e.what());
  }
  try {
    auto str = [&](const char* key) { return args.at(key).get<std::string>(); };
    auto opt_str = [&](const char* key) {
      return args.contains(key) ? args.at(key).get<std::string>() : std::string{};
    };
    auto opt_ms = [&](const char* key) {
      return std::chrono::milliseconds(args.contains(key) ? args.at(key).get<std::int64_t>() : 0);
    };
    if (call.name == "run_command") {
      ExecutionRequest req{str("command"), opt_str("working_dir"), opt_ms("timeout_ms"), {},
                           ctx.task,       ctx.step_no,          ctx.owner};
      ExecutionOutcome o = executor_.run_command(req);
      json j{{"exit_code", o.exit_code}, {"timed_out", o.timed_out}, {"stdout", o.stdout_excerpt},
             {"stderr", o.stderr_excerpt}, {"log", o.log_path}};
      if (o.cancelled) j["cancelled"] = true;
      return ToolObservation{observation_text(j), !o.ok(), false};
    }
    if (call.name == "read_file") {
      std::optional<std::pair<std::uint64_t, std::uint64_t>> range;
      if (args.contains("offset") || args.contains("length")) {
        const auto off = args.value("offset", std::uint64_t{0});
        const auto len = args.value("length", std::uint64_t{1} << 40);
        range = std::make_pair(off, off + len);
      }
      ReadResult r = executor_.read_file(str("path"), range);
      json j{{"content", r.bytes}};
      if (r.short_read) j["short_read"] = true;
      return ToolObservation{observation_text(j), false, false};
    }
    if (call.name == "write_file") {
      const std::string digest = executor_.write_file(str("path"), str("content"));
      return ToolObservation{observation_text(json{{"path", str("path")}, {"sha256", digest}}),
                             false, false};
    }
    if (call.name == "spawn_job") {
      ExecutionRequest req{str("command"), opt_str("working_dir"), {}, {},
                           ctx.task,       ctx.step_no,          ctx.owner};
      return ToolObservation{observation_text(job_json(executor_.spawn_job(req))), false, false};
    }
    if (call.name == "poll_job") {
      JobPoll p = executor_.poll_job(str("job_id"));
      json j = job_json(p.handle);
      j["tail"] = p.log_tail;
      return ToolObservation{observation_text(j), job_failed(p.handle), false};
    }
    if (call.name == "kill_job") {
      return ToolObservation{observation_text(job_json(executor_.kill_job(str("job_id")))), false,
                             false};
    }
    if (call.name == "wait_job") {
      auto timeout = opt_ms("timeout_ms");
      if (timeout.count() <= 0) timeout = executor_.config().tool_timeout;
      JobHandle h = executor_.wait_job(str("job_id"), timeout);
      return ToolObservation{observation_text(job_json(h)), job_failed(h), false};
    }
  } catch (const json::exception& e) {
    return failure(std::string("invalid arguments: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kPathEscape) {
      return ToolObservation{observation_text(json{{"error", e.what()}, {"fatal", true}}), true,
                             true};
    }
    return failure(e.what());
  }
  return failure("unknown tool: " + call.name);
}

std::vector<ToolSchema> SimulatedToolHost::tools() const {
  return {{"subtask", "Carry out one subtask of the simulated chain.",
           object_schema({{"index", {{"type", "integer"}}}}, {"index"})}};
}

ToolObservation SimulatedToolHost::execute(const ToolCall& call, const ToolContext&) {
  if (call.name != "subtask") return failure("unknown tool: " + call.name);
  int index = 0;
  try {
    index = json::parse(call.arguments).at("index").get<int>();
  } catch (const json::exception& e) {
    return failure(std::string("invalid arguments: ") + e.what());
  }
  const int attempt = ++tries_[index];
  const bool ok = simulate_step(profile_, draws_++);
  return ToolObservation{"subtask " + std::to_string(index) + " try " + std::to_string(attempt) +
                             (ok ? ": ok" : ": fail"),
                         !ok, false};
}

// ---------------------------------------------------------------------------
// Step loop

namespace {

constexpr std::string_view kNudge =
    "No tool was called. Continue with the tools, or call task_complete when the task is done.";

class TranscriptWriter {
 public:
  explicit TranscriptWriter(const std::optional<fs::path>& path) {
    if (path) {
      fs::create_directories(path->parent_path());
      out_.open(*path, std::ios::app | std::ios::binary);
      if (!out_) throw Error(ErrorCode::kIo, "cannot open transcript " + path->string());
    }
  }
  void message(int step, const ChatMessage& m) {
    if (out_.is_open()) out_ << json{{"step", step}, {"message", m}}.dump() << '\n';
  }
  void compaction(int step, int digested) {
    if (out_.is_open()) {
      out_ << json{{"step", step}, {"compaction", {{"digested_steps", digested}}}}.dump() << '\n';
    }
  }
  void flush() {
    if (out_.is_open()) {
      out_.flush();
      if (!out_) throw Error(ErrorCode::kIo, "transcript write failed");
    }
  }

 private:
  std::ofstream out_;
};

// Conversation state: the structured transcript plus the flattened request
// and its running digest, updated in place.
class Conversation {
 public:
  Conversation(ChatRequest request, Transcript transcript)
      : request_(std::move(request)),
        transcript_(std::move(transcript)),
        digester_(request_.role, request_.system, request_.tools) {
    rebuild();
  }

  void begin_step() { transcript_.steps.emplace_back(); }

  void add(ChatMessage m) {
    digester_.add(m);
    request_.messages.push_back(m);
    transcript_.steps.back().push_back(std::move(m));
  }

  const ChatRequest& request(int step, std::optional<TaskId> task, int attempt) {
    request_.meta.step = step;
    request_.meta.task_id = task;
    request_.meta.attempt = attempt;
    request_.request_digest = digester_.hex();
    return request_;
  }

  // Returns the number of steps folded into the digest block, 0 if none.
  int compact(std::size_t budget, int keep_recent) {
    if (transcript_bytes(transcript_) <= budget) return 0;
    const int before = transcript_.first_step;
    transcript_ = compact_context(transcript_, budget, keep_recent);
    rebuild();
    return transcript_.first_step - before;
  }

 private:
  void rebuild() {
    digester_ = RequestDigester(request_.role, request_.system, request_.tools);
    request_.messages = transcript_.flatten();
    for (const auto& m : request_.messages) digester_.add(m);
  }

  ChatRequest request_;
  Transcript transcript_;
  RequestDigester digester_;
};

std::string step_digest(const StepRecord& s) {
  json calls = json::array();
  for (const auto& c : s.calls) {
    calls.push_back({{"name", c.name}, {"arguments", c.arguments}, {"outcome", c.outcome_digest}});
  }
  return sha256_hex(json{{"step_no", s.step_no},
                         {"request_digest", s.request_digest},
                         {"calls", calls},
                         {"local_failure", s.local_failure}}
                        .dump());
}

}  // namespace

TaskResult run_task(const TaskBrief& brief, Backend& backend, ToolHost& host,
                    const RunConfig& config, const WorkerOptions& options) {
  TaskResult result;
  result.task_id = brief.task.task_id;
  result.attempt = options.attempt;

  ChatRequest base;
  base.role = Role::kWorker;
  base.system = options.system_prompt.empty() ? std::string(prompts::k_worker) : options.system_prompt;
  base.tools = host.tools();
  base.tools.push_back(task_complete_schema());
  base.meta.scope = "task";

  Transcript transcript;
  transcript.brief = ChatMessage{Speaker::kUser, render_brief(brief), {}, {}};
  if (transcript_bytes(transcript) > config.context_budget) {
    throw Error(ErrorCode::kConfig, "context budget of " + std::to_string(config.context_budget) +
                                        " bytes is smaller than the task brief");
  }
  Conversation convo(std::move(base), transcript);
  TranscriptWriter writer(options.transcript_path);
  writer.message(0, transcript.brief);
  writer.flush();

  const ToolContext base_ctx{brief.task.task_id, options.attempt, 0, options.owner};

  for (int step_no = 1;; ++step_no) {
    if (options.observer && options.observer->cancelled()) {
      result.terminal = Terminal::kCancelled;
      result.detail = "attempt cancelled";
      return result;
    }
    if (step_no > config.step_budget) {
      result.terminal = Terminal::kBudgetExhausted;
      result.detail = "step budget of " + std::to_string(config.step_budget) + " exhausted";
      return result;
    }
    if (step_no > 1) {
      if (int digested = convo.compact(config.context_budget, config.keep_recent_steps)) {
        writer.compaction(step_no, digested);
        if (options.observer) options.observer->on_compaction(step_no, digested);
      }
    }
    convo.begin_step();
    StepRecord step;
    step.step_no = step_no;
    std::vector<ChatMessage> step_messages;
    auto add = [&](ChatMessage m) {
      writer.message(step_no, m);
      step_messages.push_back(m);
      convo.add(std::move(m));
    };

    ChatResponse response;
    bool schema_failure = false;
    {
      const ChatRequest& req = convo.request(step_no, brief.task.task_id, options.attempt);
      step.request_digest = req.request_digest;
      try {
        response = backend.complete(req);
        validate_response(req, response);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kSchema) throw;
        add(ChatMessage{Speaker::kUser,
                        std::string("Your last reply could not be used: ") + e.what() +
                            ". Reply again using only the offered tools.",
                        {}, {}});
        const ChatRequest& again = convo.request(step_no, brief.task.task_id, options.attempt);
        try {
          response = backend.complete(again);
          validate_response(again, response);
        } catch (const Error& e2) {
          if (e2.code() != ErrorCode::kSchema) throw;
          schema_failure = true;
          add(ChatMessage{Speaker::kUser, std::string("Reply rejected again: ") + e2.what(), {}, {}});
        }
      }
    }

    bool completed = false;
    bool fatal = false;
    if (schema_failure) {
      step.local_failure = true;
    } else {
      add(ChatMessage{Speaker::kAssistant, response.assistant_text, std::nullopt,
                      response.tool_calls});
      if (response.tool_calls.empty()) {
        step.nudged = true;
        add(ChatMessage{Speaker::kUser, std::string(kNudge), {}, {}});
      }
      ToolContext ctx = base_ctx;
      ctx.step_no = step_no;
      for (const auto& call : response.tool_calls) {
        ToolObservation obs;
        if (completed || fatal) {
          obs = failure("not executed: the attempt already ended in this step");
        } else if (call.name == "task_complete") {
          try {
            json args = json::parse(call.arguments);
            const json& body = args.contains("summary") ? args.at("summary") : args;
            TaskSummary draft = body.get<TaskSummary>();
            draft.task_id = brief.task.task_id;
            std::vector<std::string> missing;
            if (options.workspace) {
              for (const auto& a : draft.artifact_index) {
                std::error_code ec;
                if (!fs::exists(options.workspace->resolve(a.path), ec)) missing.push_back(a.path);
              }
            }
            if (!missing.empty()) {
              obs = failure(missing_artifacts_message(missing));
            } else {
              result.draft_summary = std::move(draft);
              completed = true;
              obs = ToolObservation{observation_text(json{{"status", "submitted for assessment"}}),
                                    false, false};
            }
          } catch (const json::exception& e) {
            obs = failure(std::string("invalid summary: ") + e.what());
          } catch (const Error& e) {
            obs = failure(e.what());
          }
        } else {
          obs = host.execute(call, ctx);
          if (obs.fatal) {
            fatal = true;
            result.detail = obs.content;
          }
        }
        step.calls.push_back(
            ToolCallRecord{call.name, call.call_id, call.arguments, sha256_hex(obs.content),
                           obs.failure});
        step.local_failure = step.local_failure || obs.failure;
        add(ChatMessage{Speaker::kTool, std::move(obs.content), call.call_id, {}});
      }
    }
    step.digest = step_digest(step);
    writer.flush();
    result.steps.push_back(step);
    if (options.observer) options.observer->on_step(result, step, step_messages);

    if (fatal) {
      result.terminal = Terminal::kToolFatal;
      return result;
    }
    if (completed) {
      result.terminal = Terminal::kCompleted;
      return result;
    }
  }
}

}  // namespace steward
