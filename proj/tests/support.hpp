#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "aoe/fixtures.hpp"

namespace aoe::test {

namespace fs = std::filesystem;

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng{std::random_device{}()};
    path_ = fs::temp_directory_path() / ("aoe-test-" + std::to_string(::getpid()) + "-" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::vector<std::byte> read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<std::byte>(buf[i]);
  return out;
}

inline std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& file, const std::vector<std::byte>& bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out << text;
}

/// A small safetensors image: u64 LE length, the header text, then `data`.
inline std::vector<std::byte> safetensors_image(const std::string& header, const std::vector<std::byte>& data) {
  std::vector<std::byte> out(8);
  const auto n = static_cast<std::uint64_t>(header.size());
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((n >> (8 * i)) & 0xFF);
  for (char c : header) out.push_back(static_cast<std::byte>(c));
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

/// Fixture small enough for fast unit tests: 3 layers, 1 dense, 4 experts.
inline fixtures::FixtureSpec tiny_spec() {
  fixtures::FixtureSpec s;
  s.layers = 3;
  s.dense_layers = 1;
  s.experts = 4;
  s.hidden = 16;
  s.intermediate = 32;
  s.moe_intermediate = 8;
  s.vocab = 32;
  s.seed = 7;
  return s;
}

inline fixtures::Perturbation shift(Group g, double c) {
  fixtures::Perturbation p;
  p.group = g;
  p.kind = fixtures::Perturbation::Kind::Constant;
  p.magnitude = c;
  return p;
}

}  // namespace aoe::test
