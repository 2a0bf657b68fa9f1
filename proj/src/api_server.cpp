#include <atomic>
#include <map>
#include <thread>

#include <httplib.h>

#include "steward/error.hpp"
#include "steward/serialize.hpp"
#include "steward/service.hpp"

namespace steward {

namespace {

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kConflict:
    case ErrorCode::kFailedPrecondition:
    case ErrorCode::kAlreadyExists: return 409;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kSchema:
    case ErrorCode::kConfig: return 400;
    case ErrorCode::kPermissionDenied: return 403;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json error_body(std::string_view code, const std::string& message) {
  return json{{"error", {{"code", code}, {"message", message}}}};
}

json request_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json j = parse_json(req.body, "request body");
  if (!j.is_object()) throw Error(ErrorCode::kSchema, "request body must be a JSON object");
  return j;
}

std::string string_field(const json& body, const char* key, std::string fallback = {}) {
  if (!body.contains(key) || body.at(key).is_null()) return fallback;
  if (!body.at(key).is_string()) {
    throw Error(ErrorCode::kSchema, std::string(key) + " must be a string");
  }
  return body.at(key).get<std::string>();
}

std::string sse_frame(std::uint64_t seq, const std::string& line) {
  return "id: " + std::to_string(seq) + "\nevent: event\ndata: " + line + "\n\n";
}

}  // namespace

struct ApiServer::Impl {
  Options options;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> stopping{false};

  std::mutex projects_mu;
  std::map<std::string, std::shared_ptr<ProjectHost>> projects;

  // Mutations run one at a time; replies are kept by request id.
  std::mutex command_mu;
  std::map<std::string, std::pair<int, json>> replies;

  std::shared_ptr<ProjectHost> find(const std::string& id) {
    std::lock_guard lock(projects_mu);
    auto it = projects.find(id);
    if (it == projects.end()) throw Error(ErrorCode::kNotFound, "unknown project " + id);
    return it->second;
  }

  // Runs a handler, mapping engine errors onto statuses.
  template <typename F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      send_json(res, http_status(e.code()), error_body(to_string(e.code()), e.what()));
    } catch (const std::exception& e) {
      send_json(res, 500, error_body("internal", e.what()));
    }
  }

  template <typename F>
  void command(const httplib::Request& req, httplib::Response& res, const std::string& kind, F&& f) {
    guarded(res, [&] {
      auto host = find(req.matches[1]);
      const json body = request_body(req);
      const std::string request_id = string_field(body, "request_id");
      std::lock_guard lock(command_mu);
      const std::string key = host->project_id() + "\n" + kind + "\n" + request_id;
      if (!request_id.empty()) {
        if (auto it = replies.find(key); it != replies.end()) {
          send_json(res, it->second.first, it->second.second);
          return;
        }
      }
      int status = 200;
      json reply;
      try {
        reply = f(*host, body, status);
      } catch (const Error& e) {
        status = http_status(e.code());
        reply = error_body(to_string(e.code()), e.what());
      }
      if (!request_id.empty() && status < 500) replies[key] = {status, reply};
      send_json(res, status, reply);
    });
  }

  void routes();
};

void ApiServer::Impl::routes() {
  server.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (options.token.empty()) return httplib::Server::HandlerResponse::Unhandled;
    if (req.get_header_value("Authorization") == "Bearer " + options.token) {
      return httplib::Server::HandlerResponse::Unhandled;
    }
    res.set_header("WWW-Authenticate", "Bearer");
    send_json(res, 401, error_body("unauthorized", "missing or invalid bearer token"));
    return httplib::Server::HandlerResponse::Handled;
  });

  server.Get("/api/projects", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      std::vector<std::shared_ptr<ProjectHost>> hosts;
      {
        std::lock_guard lock(projects_mu);
        for (auto& [id, h] : projects) hosts.push_back(h);
      }
      json list = json::array();
      for (auto& h : hosts) list.push_back(h->list_entry());
      send_json(res, 200, json{{"projects", list}});
    });
  });

  server.Get(R"(/api/projects/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, find(req.matches[1])->snapshot()); });
  });

  server.Get(R"(/api/projects/([^/]+)/plan/(\d+))",
             [this](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 send_json(res, 200, find(req.matches[1])->plan(std::stoi(req.matches[2])));
               });
             });

  server.Get(R"(/api/projects/([^/]+)/tasks/(\d+))",
             [this](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 send_json(res, 200, find(req.matches[1])->task(TaskId(std::stoi(req.matches[2]))));
               });
             });

  server.Post(R"(/api/projects/([^/]+)/approve)",
              [this](const httplib::Request& req, httplib::Response& res) {
                command(req, res, "approve", [](ProjectHost& host, const json& body, int&) {
                  const std::string decision = string_field(body, "decision", "approve");
                  if (decision != "approve" && decision != "reject") {
                    throw Error(ErrorCode::kSchema, "decision must be approve or reject");
                  }
                  int version = 0;
                  if (body.contains("version") && !body.at("version").is_null()) {
                    version = decode<int>(body.at("version"), "version");
                  } else {
                    const ProjectState s = host.state();
                    if (!s.proposed) {
                      throw Error(ErrorCode::kConflict, "no plan version awaits approval");
                    }
                    version = s.proposed->version;
                  }
                  return host.approve(version,
                                      decision == "approve" ? Decision::kApprove : Decision::kReject,
                                      string_field(body, "actor", "api"),
                                      string_field(body, "comment"));
                });
              });

  server.Post(R"(/api/projects/([^/]+)/resume)",
              [this](const httplib::Request& req, httplib::Response& res) {
                command(req, res, "resume", [](ProjectHost& host, const json& body, int&) {
                  return host.resume(string_field(body, "instruction"));
                });
              });

  server.Post(R"(/api/projects/([^/]+)/halt)",
              [this](const httplib::Request& req, httplib::Response& res) {
                command(req, res, "halt", [](ProjectHost& host, const json& body, int& status) {
                  json reply = host.halt(string_field(body, "reason", "halt requested by operator"));
                  if (reply.at("status") == "requested") status = 202;
                  return reply;
                });
              });

  // Event stream. ?from=N yields events with sequence_no > N. Server-sent
  // events by default; format=json answers once (long poll, wait_ms).
  server.Get(R"(/api/projects/([^/]+)/events)", [this](const httplib::Request& req,
                                                       httplib::Response& res) {
    guarded(res, [&] {
      auto host = find(req.matches[1]);
      std::uint64_t from = 0;
      if (req.has_param("from")) {
        const std::string v = req.get_param_value("from");
        if (v.empty() || !std::all_of(v.begin(), v.end(), ::isdigit)) {
          throw Error(ErrorCode::kInvalidArgument, "from must be a sequence number");
        }
        from = std::stoull(v);
      } else if (req.has_header("Last-Event-ID")) {
        from = std::stoull(req.get_header_value("Last-Event-ID"));
      }
      const bool follow = req.get_param_value("follow") == "1" || req.get_param_value("follow") == "true";

      if (req.get_param_value("format") == "json") {
        long wait_ms = 0;
        if (req.has_param("wait_ms")) wait_ms = std::clamp(std::stol(req.get_param_value("wait_ms")), 0L, 30000L);
        bool idle = false;
        auto lines = host->lines_after(from, std::chrono::milliseconds(wait_ms), &idle);
        json events = json::array();
        for (const auto& l : lines) events.push_back(json::parse(l));
        send_json(res, 200,
                  json{{"events", events},
                       {"last_sequence_no", from + lines.size()},
                       {"end", idle}});
        return;
      }

      auto cursor = std::make_shared<std::uint64_t>(from);
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, host, cursor, follow](std::size_t, httplib::DataSink& sink) {
            if (stopping) {
              sink.done();
              return true;
            }
            bool idle = false;
            auto lines = host->lines_after(*cursor, options.stream_poll, &idle);
            for (const auto& l : lines) {
              const std::string frame = sse_frame(++*cursor, l);
              if (!sink.write(frame.data(), frame.size())) return false;
            }
            if (lines.empty() && idle && !follow) {
              const std::string end =
                  "event: end\ndata: " + json{{"last_sequence_no", *cursor}}.dump() + "\n\n";
              sink.write(end.data(), end.size());
              sink.done();
            } else if (lines.empty() && !sink.is_writable()) {
              return false;
            }
            return true;
          });
    });
  });
}

ApiServer::ApiServer(Options options) : impl_(std::make_unique<Impl>()) {
  impl_->options = std::move(options);
  impl_->routes();
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::add(std::shared_ptr<ProjectHost> host) {
  std::lock_guard lock(impl_->projects_mu);
  const std::string id = host->project_id();
  if (!impl_->projects.emplace(id, std::move(host)).second) {
    throw Error(ErrorCode::kAlreadyExists, "project " + id + " is already served");
  }
}

int ApiServer::start(const std::string& host, int port) {
  if (impl_->thread.joinable()) throw Error(ErrorCode::kFailedPrecondition, "server already started");
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) {
    throw Error(ErrorCode::kIo, "cannot listen on " + host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  return port_;
}

void ApiServer::stop() {
  if (!impl_->thread.joinable()) return;
  impl_->stopping = true;
  impl_->server.stop();
  impl_->thread.join();
}

}  // namespace steward
