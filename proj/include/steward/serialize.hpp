#pragma once

// Canonical JSON forms. nlohmann::json objects keep keys sorted, so dump()
// output is canonical and safe to hash. Field names are documented in
// docs/schema.md.

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "steward/error.hpp"
#include "steward/state.hpp"
#include "steward/types.hpp"

namespace steward {

using json = nlohmann::json;

void to_json(json& j, TaskId id);
void from_json(const json& j, TaskId& id);
void to_json(json& j, const RunConfig& c);
void from_json(const json& j, RunConfig& c);
void to_json(json& j, const Attachment& a);
void from_json(const json& j, Attachment& a);
void to_json(json& j, const ProjectSpec& s);
void from_json(const json& j, ProjectSpec& s);
void to_json(json& j, const TaskSpec& t);
void from_json(const json& j, TaskSpec& t);
void to_json(json& j, const Plan& p);
void from_json(const json& j, Plan& p);
void to_json(json& j, const TaskState& s);
void to_json(json& j, const ArtifactEntry& a);
void from_json(const json& j, ArtifactEntry& a);
void to_json(json& j, const Metric& m);
void from_json(const json& j, Metric& m);
void to_json(json& j, const TaskSummary& s);
void from_json(const json& j, TaskSummary& s);
void to_json(json& j, const Verdict& v);
void from_json(const json& j, Verdict& v);
void to_json(json& j, const Event& e);
void from_json(const json& j, Event& e);
void to_json(json& j, const HaltRecord& h);
void to_json(json& j, const TaskRecord& r);
void to_json(json& j, const ProjectState& s);

std::string_view to_string(Severity s);
Severity severity_from_string(std::string_view s);

// Parse helpers that turn any json exception into Error(kSchema).
json parse_json(std::string_view text, std::string_view what);

template <typename T>
T decode(const json& j, std::string_view what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string(what) + ": " + e.what());
  }
}

// One journal line, without the trailing LF.
std::string serialize_event(const Event& e);
Event parse_event(std::string_view line);

// Canonical text with timestamps removed; used for deterministic digests.
std::string canonical_without_timestamp(const Event& e);

}  // namespace steward

// Verdict is a std::variant, which argument-dependent lookup does not
// associate with this namespace.
template <>
struct nlohmann::adl_serializer<steward::Verdict> {
  static void to_json(nlohmann::json& j, const steward::Verdict& v) { steward::to_json(j, v); }
  static void from_json(const nlohmann::json& j, steward::Verdict& v) {
    steward::from_json(j, v);
  }
};
