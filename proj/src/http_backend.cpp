#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>
#include <thread>

#include "steward/backend.hpp"
#include "steward/error.hpp"
#include "steward/serialize.hpp"

namespace steward {
namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix without trailing slash
};

Endpoint split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kConfig, "STEWARD_LLM_BASE_URL must include a scheme");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  Endpoint e;
  e.origin = url.substr(0, path_start);
  e.prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  return e;
}

json to_provider_messages(const ChatRequest& r) {
  json out = json::array();
  out.push_back({{"role", "system"}, {"content", r.system}});
  for (const auto& m : r.messages) {
    json msg{{"role", to_string(m.speaker)}, {"content", m.content}};
    if (m.tool_call_id) msg["tool_call_id"] = *m.tool_call_id;
    if (!m.tool_calls.empty()) {
      json calls = json::array();
      for (const auto& c : m.tool_calls) {
        calls.push_back({{"id", c.call_id},
                         {"type", "function"},
                         {"function", {{"name", c.name}, {"arguments", c.arguments}}}});
      }
      msg["tool_calls"] = calls;
    }
    out.push_back(std::move(msg));
  }
  return out;
}

ChatResponse from_provider(const json& body) {
  try {
    const json& msg = body.at("choices").at(0).at("message");
    ChatResponse r;
    if (msg.contains("content") && msg["content"].is_string()) {
      r.assistant_text = msg["content"].get<std::string>();
    }
    for (const auto& c : msg.value("tool_calls", json::array())) {
      const json& fn = c.at("function");
      const json& args = fn.at("arguments");
      r.tool_calls.push_back(ToolCall{fn.at("name").get<std::string>(),
                                      args.is_string() ? args.get<std::string>() : args.dump(),
                                      c.value("id", "")});
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("malformed provider response: ") + e.what());
  }
}

}  // namespace

HttpBackend::HttpBackend(Options options) : options_(std::move(options)) {
  if (options_.base_url.empty() || options_.model.empty()) {
    throw Error(ErrorCode::kConfig, "live backend needs a base URL and a model name");
  }
}

std::unique_ptr<HttpBackend> HttpBackend::from_environment() {
  auto env = [](const char* name) {
    const char* v = std::getenv(name);
    return std::string(v ? v : "");
  };
  Options o;
  o.base_url = env("STEWARD_LLM_BASE_URL");
  o.api_key = env("STEWARD_LLM_API_KEY");
  o.model = env("STEWARD_LLM_MODEL");
  return std::make_unique<HttpBackend>(std::move(o));
}

ChatResponse HttpBackend::complete(const ChatRequest& request) {
  const Endpoint ep = split_url(options_.base_url);
  json tools = json::array();
  for (const auto& t : request.tools) {
    tools.push_back({{"type", "function"},
                     {"function",
                      {{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}}}});
  }
  json body{{"model", options_.model}, {"messages", to_provider_messages(request)}};
  if (!tools.empty()) body["tools"] = tools;

  httplib::Client client(ep.origin);
  client.set_read_timeout(options_.timeout);
  client.set_write_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::seconds(1 << (attempt - 1)));
    auto res = client.Post(ep.prefix + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "provider returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error(ErrorCode::kTransport, "provider returned HTTP " + std::to_string(res->status));
    }
    ChatResponse response = from_provider(parse_json(res->body, "provider response"));
    validate_response(request, response);
    return response;
  }
  throw Error(ErrorCode::kTransport, last_error + " (after " +
                                         std::to_string(options_.max_retries + 1) + " tries)");
}

}  // namespace steward
