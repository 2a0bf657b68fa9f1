#pragma once

#include <atomic>
#include <cstdint>
#include <string>

namespace steward {

class Clock {
 public:
  virtual ~Clock() = default;
  // RFC 3339 UTC timestamp with millisecond precision.
  virtual std::string now() = 0;
};

class SystemClock final : public Clock {
 public:
  std::string now() override;
};

// Deterministic clock for fixtures: one second per reading from a fixed epoch.
class LogicalClock final : public Clock {
 public:
  explicit LogicalClock(std::int64_t start_epoch_seconds = 1767225600)  // 2026-01-01
      : next_(start_epoch_seconds) {}
  std::string now() override;

 private:
  std::atomic<std::int64_t> next_;
};

std::string format_rfc3339(std::int64_t epoch_ms);

}  // namespace steward
