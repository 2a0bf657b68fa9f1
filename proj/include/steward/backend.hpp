#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steward/digest.hpp"
#include "steward/types.hpp"

namespace steward {

enum class Role { kPlanner, kWorker, kAssessor };
enum class Speaker { kUser, kAssistant, kTool };

std::string_view to_string(Role role);
Role role_from_string(std::string_view s);
std::string_view to_string(Speaker speaker);
Speaker speaker_from_string(std::string_view s);

struct ToolSchema {
  std::string name;
  std::string description;
  nlohmann::json parameters = nlohmann::json::object();  // JSON Schema

  friend bool operator==(const ToolSchema&, const ToolSchema&) = default;
};

struct ToolCall {
  std::string name;
  std::string arguments;  // JSON text, validated by the consumer
  std::string call_id;

  friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

struct ChatMessage {
  Speaker speaker = Speaker::kUser;
  std::string content;
  std::optional<std::string> tool_call_id;
  std::vector<ToolCall> tool_calls;  // assistant turns only

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

// Routing metadata for test backends. Not part of the request digest.
struct RequestMeta {
  std::string scope;             // plan | resume | task | preflight | project
  std::optional<TaskId> task_id;
  std::optional<int> attempt;
  int step = 1;                  // 1-based exchange index within the conversation

  friend bool operator==(const RequestMeta&, const RequestMeta&) = default;
};

struct ChatRequest {
  Role role = Role::kWorker;
  std::string system;
  std::vector<ChatMessage> messages;
  std::vector<ToolSchema> tools;
  RequestMeta meta;
  std::string request_digest;

  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

struct ChatResponse {
  std::string assistant_text;
  std::vector<ToolCall> tool_calls;

  friend bool operator==(const ChatResponse&, const ChatResponse&) = default;
};

void to_json(nlohmann::json& j, const ToolSchema& t);
void from_json(const nlohmann::json& j, ToolSchema& t);
void to_json(nlohmann::json& j, const ToolCall& c);
void from_json(const nlohmann::json& j, ToolCall& c);  // arguments may be a string or an object
void to_json(nlohmann::json& j, const ChatMessage& m);
void from_json(const nlohmann::json& j, ChatMessage& m);
void to_json(nlohmann::json& j, const RequestMeta& m);
void from_json(const nlohmann::json& j, RequestMeta& m);
void to_json(nlohmann::json& j, const ChatRequest& r);
void from_json(const nlohmann::json& j, ChatRequest& r);
void to_json(nlohmann::json& j, const ChatResponse& r);
void from_json(const nlohmann::json& j, ChatResponse& r);

// Incremental request digest: a hash over the header (role, system, tools)
// followed by one hash per message, so a growing conversation is rehashed in
// O(new messages).
class RequestDigester {
 public:
  RequestDigester(Role role, std::string_view system, const std::vector<ToolSchema>& tools);
  void add(const ChatMessage& message);
  std::string hex() const { return state_.hex(); }

 private:
  Sha256 state_;
};

std::string compute_request_digest(const ChatRequest& request);
// Fills request_digest.
void seal(ChatRequest& request);

// Throws kSchema when a tool call names a tool the request did not offer.
void validate_response(const ChatRequest& request, const ChatResponse& response);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Scripted backend

struct MatchKey {
  std::optional<Role> role;
  std::optional<std::string> scope;
  std::optional<TaskId> task_id;
  std::optional<int> attempt;
  std::optional<int> step;

  int specificity() const;
  bool matches(const ChatRequest& request) const;
  std::string describe() const;

  friend bool operator==(const MatchKey&, const MatchKey&) = default;
};

std::string describe_request_key(const ChatRequest& request);

struct ScriptEntry {
  std::variant<MatchKey, std::string> match;  // key or explicit request digest
  ChatResponse response;
};

// Responses may contain {{task_id}}, {{attempt}} and {{step}} placeholders,
// expanded from the request metadata. The most specific matching key wins.
class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(std::vector<ScriptEntry> entries);
  static ScriptedBackend from_file(const std::filesystem::path& path);
  static std::vector<ScriptEntry> parse_script(std::string_view text, std::string_view what);

  ChatResponse complete(const ChatRequest& request) override;
  std::size_t exchanges() const;

 private:
  std::vector<ScriptEntry> entries_;
  mutable std::mutex mu_;
  std::size_t exchanges_ = 0;
};

// Tries each backend in order; a kScriptExhausted error falls through.
class LayeredBackend final : public Backend {
 public:
  explicit LayeredBackend(std::vector<std::shared_ptr<Backend>> layers)
      : layers_(std::move(layers)) {}
  ChatResponse complete(const ChatRequest& request) override;

 private:
  std::vector<std::shared_ptr<Backend>> layers_;
};

// ---------------------------------------------------------------------------
// Record and replay

class RecordingBackend final : public Backend {
 public:
  RecordingBackend(std::shared_ptr<Backend> inner, std::filesystem::path transcript);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  std::shared_ptr<Backend> inner_;
  std::filesystem::path path_;
  std::mutex mu_;
  std::uint64_t count_ = 0;
};

struct TranscriptEntry {
  std::uint64_t exchange = 0;
  std::string request_digest;
  nlohmann::json request;
  ChatResponse response;
};

std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path);

class ReplayBackend final : public Backend {
 public:
  enum class Mode {
    kOrdered,  // requests must arrive in recorded order
    kKeyed,    // matched by digest; for concurrent runs
  };
  ReplayBackend(const std::filesystem::path& transcript, Mode mode);
  explicit ReplayBackend(std::vector<TranscriptEntry> entries, Mode mode = Mode::kOrdered);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  Mode mode_;
  std::vector<TranscriptEntry> entries_;
  std::map<std::string, std::deque<std::size_t>> by_digest_;
  std::mutex mu_;
  std::size_t next_ = 0;
};

// ---------------------------------------------------------------------------
// Stochastic simulation

struct StochasticProfile {
  double per_step_success = 0.99;
  std::uint64_t seed = 0;
};

// Counter-based: the outcome depends only on (seed, step_index).
bool simulate_step(const StochasticProfile& profile, std::uint64_t step_index);

std::uint64_t splitmix64(std::uint64_t x);

// A worker model that walks subtasks 1..n through the "subtask" tool and
// retries a failed subtask up to `retries` times. It decides from its last
// tool observation only, then calls task_complete reporting how far it got.
// As an assessor it accepts exactly the drafts that report all subtasks done.
class StochasticBackend final : public Backend {
 public:
  StochasticBackend(int subtasks, int retries) : subtasks_(subtasks), retries_(retries) {}
  ChatResponse complete(const ChatRequest& request) override;

 private:
  ChatResponse worker_turn(const ChatRequest& request) const;
  ChatResponse assessor_turn(const ChatRequest& request) const;

  int subtasks_;
  int retries_;
};

// ---------------------------------------------------------------------------
// Live provider

// OpenAI-compatible chat completions endpoint. Configured from
// STEWARD_LLM_BASE_URL, STEWARD_LLM_API_KEY and STEWARD_LLM_MODEL.
class HttpBackend final : public Backend {
 public:
  struct Options {
    std::string base_url;
    std::string api_key;
    std::string model;
    int max_retries = 3;
    std::chrono::seconds timeout{300};
  };
  explicit HttpBackend(Options options);
  static std::unique_ptr<HttpBackend> from_environment();
  ChatResponse complete(const ChatRequest& request) override;

 private:
  Options options_;
};

}  // namespace steward
