#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include "steward/fault.hpp"
#include "steward/types.hpp"

namespace steward {

inline constexpr std::string_view kJournalSchema = "steward-journal";
inline constexpr int kJournalSchemaVersion = 1;

struct JournalContents {
  std::string project_id;
  std::vector<Event> events;
  std::vector<std::string> lines;  // serialized events, verbatim
};

// Append-only, line-delimited event log (journal/events.jsonl). The first line
// is a schema header; every following line is one Event. A writer holds an
// exclusive advisory lock for its lifetime.
class Journal {
 public:
  static Journal create(const std::filesystem::path& path, const std::string& project_id,
                        bool sync);
  static Journal open(const std::filesystem::path& path, bool sync);

  // Reads and validates without taking the writer lock. Refuses torn or
  // unparseable records and sequence gaps.
  static JournalContents read(const std::filesystem::path& path);

  Journal(Journal&& other) noexcept;
  Journal& operator=(Journal&& other) noexcept;
  Journal(const Journal&) = delete;
  Journal& operator=(const Journal&) = delete;
  ~Journal();

  // Assigns the next sequence number, writes one line and (optionally) fsyncs.
  // Returns the event together with its serialized line.
  std::pair<Event, std::string> append(EventPayload payload, std::string timestamp);

  std::uint64_t last_sequence_no() const;
  const std::filesystem::path& path() const { return path_; }
  void set_fault_injector(FaultInjector* injector) { fault_ = injector; }

 private:
  Journal(std::filesystem::path path, int fd, int lock_fd, std::uint64_t last_seq, bool sync);

  std::filesystem::path path_;
  int fd_ = -1;
  int lock_fd_ = -1;
  std::uint64_t last_seq_ = 0;
  bool sync_ = true;
  FaultInjector* fault_ = nullptr;
  mutable std::mutex mu_;
};

}  // namespace steward
