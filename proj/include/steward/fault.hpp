#pragma once

// Fault injection for crash-recovery tests. Production code calls
// FaultInjector::point() at every durable write boundary; with no injector
// installed the call is a no-op.

#include <atomic>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace steward {

// Thrown at an injected crash point. Not derived from steward::Error so that
// ordinary error handling never swallows it.
class SimulatedCrash : public std::runtime_error {
 public:
  explicit SimulatedCrash(const std::string& where)
      : std::runtime_error("simulated crash at " + where) {}
};

class FaultInjector {
 public:
  // crash_at = 0 counts points without crashing.
  explicit FaultInjector(std::uint64_t crash_at = 0) : crash_at_(crash_at) {}

  // Once the crash fires every later point also throws: the "process" is dead.
  void point(std::string_view label) {
    const auto n = ++count_;
    if (dead_.load()) throw SimulatedCrash(std::string(label) + " (after crash)");
    if (crash_at_ != 0 && n >= crash_at_) {
      dead_.store(true);
      {
        std::lock_guard lock(mu_);
        crashed_at_ = std::string(label);
      }
      throw SimulatedCrash(std::string(label));
    }
  }

  std::uint64_t count() const { return count_.load(); }
  bool crashed() const { return dead_.load(); }
  std::string crashed_at() const {
    std::lock_guard lock(mu_);
    return crashed_at_;
  }

 private:
  std::uint64_t crash_at_;
  std::atomic<std::uint64_t> count_{0};
  std::atomic<bool> dead_{false};
  mutable std::mutex mu_;
  std::string crashed_at_;
};

inline void fault_point(FaultInjector* injector, std::string_view label) {
  if (injector != nullptr) injector->point(label);
}

}  // namespace steward
