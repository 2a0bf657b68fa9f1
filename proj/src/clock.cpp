#include "steward/clock.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>

namespace steward {

std::string format_rfc3339(std::int64_t epoch_ms) {
  std::time_t secs = static_cast<std::time_t>(epoch_ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                static_cast<int>(epoch_ms % 1000));
  return buf;
}

std::string SystemClock::now() {
  using namespace std::chrono;
  return format_rfc3339(
      duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count());
}

std::string LogicalClock::now() { return format_rfc3339(next_.fetch_add(1) * 1000); }

}  // namespace steward
