#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace aoe {

/// Incremental SHA-256; digest() returns lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::byte> data);
  void update(std::string_view text);
  std::string digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const std::byte> data);

}  // namespace aoe
