#pragma once

#include <span>
#include <string>
#include <string_view>

namespace steward {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_hex(std::span<const std::string> parts, char separator = '\n');

// Incremental SHA-256; copyable so a running prefix can be finalized repeatedly.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256& other);
  Sha256& operator=(const Sha256& other);

  void update(std::string_view data);
  std::string hex() const;  // does not disturb the running state

 private:
  struct Impl;
  Impl* impl_;
};

}  // namespace steward
