#include "steward/backend.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "steward/error.hpp"
#include "steward/path_jail.hpp"
#include "steward/serialize.hpp"

namespace steward {

std::string_view to_string(Role role) {
  switch (role) {
    case Role::kPlanner: return "planner";
    case Role::kWorker: return "worker";
    case Role::kAssessor: return "assessor";
  }
  return "worker";
}

Role role_from_string(std::string_view s) {
  if (s == "planner") return Role::kPlanner;
  if (s == "worker") return Role::kWorker;
  if (s == "assessor") return Role::kAssessor;
  throw Error(ErrorCode::kSchema, "unknown role tag: " + std::string(s));
}

std::string_view to_string(Speaker speaker) {
  switch (speaker) {
    case Speaker::kUser: return "user";
    case Speaker::kAssistant: return "assistant";
    case Speaker::kTool: return "tool";
  }
  return "user";
}

Speaker speaker_from_string(std::string_view s) {
  if (s == "user") return Speaker::kUser;
  if (s == "assistant") return Speaker::kAssistant;
  if (s == "tool") return Speaker::kTool;
  throw Error(ErrorCode::kSchema, "unknown speaker: " + std::string(s));
}

void to_json(json& j, const ToolSchema& t) {
  j = json{{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}};
}
void from_json(const json& j, ToolSchema& t) {
  t.name = j.at("name").get<std::string>();
  t.description = j.value("description", "");
  t.parameters = j.value("parameters", json::object());
}

void to_json(json& j, const ToolCall& c) {
  j = json{{"name", c.name}, {"arguments", c.arguments}, {"call_id", c.call_id}};
}
void from_json(const json& j, ToolCall& c) {
  c.name = j.at("name").get<std::string>();
  const auto& args = j.contains("arguments") ? j.at("arguments") : json::object();
  c.arguments = args.is_string() ? args.get<std::string>() : args.dump();
  c.call_id = j.value("call_id", "");
}

void to_json(json& j, const ChatMessage& m) {
  j = json{{"speaker", to_string(m.speaker)}, {"content", m.content}};
  if (m.tool_call_id) j["tool_call_id"] = *m.tool_call_id;
  if (!m.tool_calls.empty()) j["tool_calls"] = m.tool_calls;
}
void from_json(const json& j, ChatMessage& m) {
  m.speaker = speaker_from_string(j.at("speaker").get<std::string>());
  m.content = j.value("content", "");
  m.tool_call_id.reset();
  if (j.contains("tool_call_id")) m.tool_call_id = j.at("tool_call_id").get<std::string>();
  m.tool_calls = j.value("tool_calls", std::vector<ToolCall>{});
}

void to_json(json& j, const RequestMeta& m) {
  j = json{{"scope", m.scope}, {"step", m.step}};
  if (m.task_id) j["task_id"] = *m.task_id;
  if (m.attempt) j["attempt"] = *m.attempt;
}
void from_json(const json& j, RequestMeta& m) {
  m.scope = j.value("scope", "");
  m.step = j.value("step", 1);
  m.task_id.reset();
  m.attempt.reset();
  if (j.contains("task_id")) m.task_id = j.at("task_id").get<TaskId>();
  if (j.contains("attempt")) m.attempt = j.at("attempt").get<int>();
}

void to_json(json& j, const ChatRequest& r) {
  j = json{{"role_tag", to_string(r.role)}, {"system", r.system},     {"messages", r.messages},
           {"tools", r.tools},              {"meta", r.meta},         {"request_digest", r.request_digest}};
}
void from_json(const json& j, ChatRequest& r) {
  r.role = role_from_string(j.at("role_tag").get<std::string>());
  r.system = j.value("system", "");
  r.messages = j.at("messages").get<std::vector<ChatMessage>>();
  r.tools = j.value("tools", std::vector<ToolSchema>{});
  r.meta = j.value("meta", RequestMeta{});
  r.request_digest = j.value("request_digest", "");
}

void to_json(json& j, const ChatResponse& r) {
  j = json{{"text", r.assistant_text}, {"tool_calls", r.tool_calls}};
}
void from_json(const json& j, ChatResponse& r) {
  r.assistant_text = j.value("text", "");
  r.tool_calls = j.value("tool_calls", std::vector<ToolCall>{});
}

// ---------------------------------------------------------------------------

RequestDigester::RequestDigester(Role role, std::string_view system,
                                 const std::vector<ToolSchema>& tools) {
  json header{{"role_tag", to_string(role)}, {"system", system}, {"tools", tools}};
  state_.update(sha256_hex(header.dump()));
}

void RequestDigester::add(const ChatMessage& message) {
  state_.update("\n");
  state_.update(sha256_hex(json(message).dump()));
}

std::string compute_request_digest(const ChatRequest& request) {
  RequestDigester d(request.role, request.system, request.tools);
  for (const auto& m : request.messages) d.add(m);
  return d.hex();
}

void seal(ChatRequest& request) { request.request_digest = compute_request_digest(request); }

void validate_response(const ChatRequest& request, const ChatResponse& response) {
  for (const auto& call : response.tool_calls) {
    const bool offered = std::any_of(request.tools.begin(), request.tools.end(),
                                     [&](const ToolSchema& t) { return t.name == call.name; });
    if (!offered) {
      throw Error(ErrorCode::kSchema, "response calls tool '" + call.name +
                                          "' which the request did not offer");
    }
  }
}

// ---------------------------------------------------------------------------
// Scripted

int MatchKey::specificity() const {
  return int(role.has_value()) + int(scope.has_value()) + int(task_id.has_value()) +
         int(attempt.has_value()) + int(step.has_value());
}

bool MatchKey::matches(const ChatRequest& r) const {
  if (role && *role != r.role) return false;
  if (scope && *scope != r.meta.scope) return false;
  if (task_id && task_id != r.meta.task_id) return false;
  if (attempt && attempt != r.meta.attempt) return false;
  if (step && *step != r.meta.step) return false;
  return true;
}

std::string MatchKey::describe() const {
  std::string out = "(";
  auto add = [&out](const std::string& part) {
    if (out.size() > 1) out += ", ";
    out += part;
  };
  if (role) add("role=" + std::string(to_string(*role)));
  if (scope) add("scope=" + *scope);
  if (task_id) add("task=" + to_string(*task_id));
  if (attempt) add("attempt=" + std::to_string(*attempt));
  if (step) add("step=" + std::to_string(*step));
  return out + ")";
}

std::string describe_request_key(const ChatRequest& r) {
  MatchKey k{r.role, r.meta.scope, r.meta.task_id, r.meta.attempt, r.meta.step};
  if (r.meta.scope.empty()) k.scope.reset();
  return k.describe();
}

namespace {

void replace_all(std::string& s, std::string_view from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos;
       pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

ChatResponse expand(ChatResponse r, const RequestMeta& meta) {
  const std::string task = meta.task_id ? to_string(*meta.task_id) : "";
  const std::string attempt = meta.attempt ? std::to_string(*meta.attempt) : "";
  const std::string step = std::to_string(meta.step);
  auto apply = [&](std::string& s) {
    if (s.find("{{") == std::string::npos) return;
    replace_all(s, "{{task_id}}", task);
    replace_all(s, "{{attempt}}", attempt);
    replace_all(s, "{{step}}", step);
  };
  apply(r.assistant_text);
  for (auto& c : r.tool_calls) {
    apply(c.arguments);
    apply(c.call_id);
  }
  return r;
}

MatchKey parse_match(const json& m) {
  MatchKey k;
  if (m.contains("role")) k.role = role_from_string(m.at("role").get<std::string>());
  if (m.contains("scope")) k.scope = m.at("scope").get<std::string>();
  if (m.contains("task_id")) k.task_id = TaskId(m.at("task_id").get<int>());
  if (m.contains("attempt")) k.attempt = m.at("attempt").get<int>();
  if (m.contains("step")) k.step = m.at("step").get<int>();
  return k;
}

}  // namespace

ScriptedBackend::ScriptedBackend(std::vector<ScriptEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (std::size_t j = i + 1; j < entries_.size(); ++j) {
      if (entries_[i].match == entries_[j].match) {
        const auto* k = std::get_if<MatchKey>(&entries_[i].match);
        throw Error(ErrorCode::kInvalidArgument,
                    "script entries " + std::to_string(i + 1) + " and " + std::to_string(j + 1) +
                        " share the match key " +
                        (k ? k->describe() : std::get<std::string>(entries_[i].match)));
      }
    }
  }
}

std::vector<ScriptEntry> ScriptedBackend::parse_script(std::string_view text,
                                                       std::string_view what) {
  std::vector<ScriptEntry> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(what) + ":" + std::to_string(line_no);
    json j = parse_json(line, where);
    try {
      ScriptEntry e;
      if (j.contains("request_digest")) {
        e.match = j.at("request_digest").get<std::string>();
      } else {
        e.match = parse_match(j.value("match", json::object()));
      }
      e.response = j.at("response").get<ChatResponse>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::kSchema, where + ": " + ex.what());
    }
  }
  return out;
}

ScriptedBackend ScriptedBackend::from_file(const std::filesystem::path& path) {
  return ScriptedBackend(parse_script(read_file_bytes(path), path.string()));
}

ChatResponse ScriptedBackend::complete(const ChatRequest& request) {
  const std::string digest =
      request.request_digest.empty() ? compute_request_digest(request) : request.request_digest;
  const ScriptEntry* best = nullptr;
  int best_spec = -1;
  bool ambiguous = false;
  for (const auto& e : entries_) {
    int spec = -1;
    if (const auto* d = std::get_if<std::string>(&e.match)) {
      if (*d == digest) spec = 100;
    } else if (const auto& k = std::get<MatchKey>(e.match); k.matches(request)) {
      spec = k.specificity();
    }
    if (spec < 0) continue;
    if (spec > best_spec) {
      best = &e;
      best_spec = spec;
      ambiguous = false;
    } else if (spec == best_spec) {
      ambiguous = true;
    }
  }
  if (best == nullptr) {
    throw Error(ErrorCode::kScriptExhausted,
                "script exhausted: no entry for " + describe_request_key(request));
  }
  if (ambiguous) {
    throw Error(ErrorCode::kInvalidArgument,
                "ambiguous script: several entries equally match " + describe_request_key(request));
  }
  {
    std::lock_guard lock(mu_);
    ++exchanges_;
  }
  return expand(best->response, request.meta);
}

std::size_t ScriptedBackend::exchanges() const {
  std::lock_guard lock(mu_);
  return exchanges_;
}

ChatResponse LayeredBackend::complete(const ChatRequest& request) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      return layers_[i]->complete(request);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kScriptExhausted || i + 1 == layers_.size()) throw;
    }
  }
  throw Error(ErrorCode::kScriptExhausted,
              "script exhausted: no entry for " + describe_request_key(request));
}

// ---------------------------------------------------------------------------
// Record / replay

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner, std::filesystem::path transcript)
    : inner_(std::move(inner)), path_(std::move(transcript)) {}

ChatResponse RecordingBackend::complete(const ChatRequest& request) {
  ChatResponse response = inner_->complete(request);
  std::lock_guard lock(mu_);
  ChatRequest sealed = request;
  if (sealed.request_digest.empty()) seal(sealed);
  json line{{"exchange", count_ + 1},
            {"request_digest", sealed.request_digest},
            {"request", sealed},
            {"response", response}};
  std::FILE* f = std::fopen(path_.c_str(), "ab");
  if (f == nullptr) {
    throw Error(ErrorCode::kIo, "cannot open transcript " + path_.string());
  }
  const std::string text = line.dump() + "\n";
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size() &&
                  std::fflush(f) == 0 && ::fsync(fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw Error(ErrorCode::kIo, "transcript write failed: " + path_.string());
  ++count_;
  return response;
}

std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path) {
  std::vector<TranscriptEntry> out;
  std::istringstream in(read_file_bytes(path));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = parse_json(line, path.string() + ":" + std::to_string(line_no));
    try {
      TranscriptEntry e;
      e.exchange = j.at("exchange").get<std::uint64_t>();
      e.request_digest = j.at("request_digest").get<std::string>();
      e.request = j.at("request");
      e.response = j.at("response").get<ChatResponse>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::kSchema, path.string() + ":" + std::to_string(line_no) + ": " +
                                          ex.what());
    }
  }
  return out;
}

ReplayBackend::ReplayBackend(const std::filesystem::path& transcript, Mode mode)
    : ReplayBackend(read_transcript(transcript), mode) {}

ReplayBackend::ReplayBackend(std::vector<TranscriptEntry> entries, Mode mode)
    : mode_(mode), entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    by_digest_[entries_[i].request_digest].push_back(i);
  }
}

ChatResponse ReplayBackend::complete(const ChatRequest& request) {
  const std::string digest =
      request.request_digest.empty() ? compute_request_digest(request) : request.request_digest;
  std::lock_guard lock(mu_);
  const std::size_t exchange = next_ + 1;
  if (mode_ == Mode::kOrdered) {
    if (next_ >= entries_.size()) {
      throw Error(ErrorCode::kDivergence, "divergence at exchange " + std::to_string(exchange) +
                                              ": unexpected request " + digest +
                                              " beyond the end of the recording");
    }
    const auto& e = entries_[next_];
    if (e.request_digest != digest) {
      throw Error(ErrorCode::kDivergence, "divergence at exchange " + std::to_string(exchange) +
                                              ": recorded " + e.request_digest + ", got " +
                                              digest);
    }
    ++next_;
    return e.response;
  }
  auto it = by_digest_.find(digest);
  if (it == by_digest_.end() || it->second.empty()) {
    throw Error(ErrorCode::kDivergence, "divergence at exchange " + std::to_string(exchange) +
                                            ": request " + digest + " is not in the recording");
  }
  const std::size_t index = it->second.front();
  it->second.pop_front();
  ++next_;
  return entries_[index].response;
}

// ---------------------------------------------------------------------------
// Stochastic

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

bool simulate_step(const StochasticProfile& profile, std::uint64_t step_index) {
  const std::uint64_t bits = splitmix64(profile.seed ^ splitmix64(step_index));
  const double u = static_cast<double>(bits >> 11) * 0x1.0p-53;  // uniform in [0, 1)
  return u < profile.per_step_success;
}

namespace {

// "subtask <k> try <j>: ok|fail"
struct Observation {
  int subtask = 0;
  int attempt = 0;
  bool ok = false;
};

std::optional<Observation> parse_observation(std::string_view text) {
  Observation o;
  char verdict[8] = {};
  if (std::sscanf(std::string(text).c_str(), "subtask %d try %d: %7s", &o.subtask, &o.attempt,
                  verdict) != 3) {
    return std::nullopt;
  }
  o.ok = std::string_view(verdict) == "ok";
  return o;
}

ToolCall subtask_call(int k, int step) {
  return ToolCall{"subtask", json{{"index", k}}.dump(), "call-" + std::to_string(step)};
}

}  // namespace

ChatResponse StochasticBackend::complete(const ChatRequest& request) {
  return request.role == Role::kAssessor ? assessor_turn(request) : worker_turn(request);
}

ChatResponse StochasticBackend::worker_turn(const ChatRequest& request) const {
  std::optional<Observation> last;
  for (auto it = request.messages.rbegin(); it != request.messages.rend(); ++it) {
    if (it->speaker == Speaker::kTool) {
      last = parse_observation(it->content);
      break;
    }
  }
  const int step = request.meta.step;
  if (!last) return ChatResponse{"", {subtask_call(1, step)}};
  if (last->ok && last->subtask < subtasks_) {
    return ChatResponse{"", {subtask_call(last->subtask + 1, step)}};
  }
  if (!last->ok && last->attempt <= retries_) {
    return ChatResponse{"retrying", {subtask_call(last->subtask, step)}};
  }
  const int done = last->ok ? last->subtask : last->subtask - 1;
  json summary{{"outcome", done == subtasks_
                               ? "all " + std::to_string(subtasks_) + " subtasks succeeded"
                               : "stopped: subtask " + std::to_string(last->subtask) + " failed"},
               {"artifact_index", json::array()},
               {"usage_notes", ""},
               {"data_formats", ""},
               {"metrics", json::array({json{{"name", "subtasks_completed"},
                                             {"value", done},
                                             {"unit", "count"}}})}};
  return ChatResponse{"", {ToolCall{"task_complete", json{{"summary", summary}}.dump(),
                                    "call-" + std::to_string(step)}}};
}

ChatResponse StochasticBackend::assessor_turn(const ChatRequest& request) const {
  const std::string marker = "all " + std::to_string(subtasks_) + " subtasks succeeded";
  json args;
  if (request.meta.scope == "project") {
    args = {{"kind", "halt"}, {"reason", "subtask chain could not be completed"}};
  } else {
    bool complete = false;
    for (const auto& m : request.messages) {
      if (m.speaker == Speaker::kUser && m.content.find(marker) != std::string::npos) {
        complete = true;
      }
    }
    if (complete) {
      args = {{"kind", "accept"}};
    } else {
      args = {{"kind", "revise"}, {"feedback", "subtask chain incomplete"}, {"severity", "major"}};
    }
  }
  return ChatResponse{"", {ToolCall{"issue_verdict", args.dump(), "verdict-1"}}};
}

}  // namespace steward
