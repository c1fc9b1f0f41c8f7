#pragma once

// Deterministic, architecture-shaped test checkpoints.
//
// Random values come from std::mt19937_64 (fully specified by the C++
// standard) seeded per tensor with splitmix64(seed + fnv1a64(name)); see
// docs/formats.md for the exact derivation. Gaussian draws use Box-Muller on
// 53-bit uniforms, so no platform distribution object is involved.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aoe/safetensors.hpp"
#include "aoe/taxonomy.hpp"

namespace aoe::fixtures {

struct Perturbation {
  enum class Kind { Constant, Gaussian };
  // Selector: every set field must match. At least one must be set.
  std::optional<Group> group;
  std::optional<std::uint32_t> layer;
  std::string pattern;  // taxonomy pattern syntax; empty = any name
  Kind kind = Kind::Constant;
  double magnitude = 0.0;  // shift c, or sigma
};

struct FixtureSpec {
  std::uint32_t layers = 5;
  std::uint32_t dense_layers = 2;
  std::uint32_t experts = 4;
  std::uint32_t shared_experts = 1;
  std::uint32_t hidden = 128;
  std::uint32_t intermediate = 384;
  std::uint32_t moe_intermediate = 192;
  std::uint32_t vocab = 1024;
  std::uint32_t q_lora_rank = 0;   // 0: hidden / 2
  std::uint32_t kv_lora_rank = 0;  // 0: hidden / 4
  std::uint32_t shards = 2;
  std::uint64_t seed = 42;
  double init_scale = 0.05;
  DType default_dtype = DType::F32;
  std::map<Group, DType> dtypes;  // per-group override
  std::vector<Perturbation> perturbations;

  void validate() const;
};

FixtureSpec spec_from_json(std::string_view text);
FixtureSpec load_spec(const std::filesystem::path& file);
std::string spec_to_json(const FixtureSpec& spec);

struct ManifestEntry {
  std::string name;
  TensorCategory category;
  std::vector<std::uint64_t> shape;
  DType dtype = DType::F32;
  std::string checksum;  // sha256 of the tensor's raw bytes; empty if not generated
};

struct ExpectedDiff {
  double expected = 0.0;
  std::string kind = "none";  // none | constant | gaussian
  double bound = 0.0;         // |measured - expected| <= bound
};

struct Fixture {
  CheckpointIndex index;
  std::vector<ManifestEntry> manifest;
  std::map<std::string, ExpectedDiff> expected;  // variants only
};

/// Names, categories, shapes and dtypes in file order. No data.
std::vector<ManifestEntry> fixture_tensors(const FixtureSpec& spec);

/// Writes the base checkpoint and "manifest.json" into `dir`.
Fixture generate_base(const FixtureSpec& spec, const std::filesystem::path& dir);

/// Writes the base perturbed by `perturbations`, plus "manifest.json" and
/// "expected_diffs.json". Throws ValidationError when a selector matches no
/// tensor or two perturbations hit the same tensor.
Fixture generate_variant(const FixtureSpec& spec, std::span<const Perturbation> perturbations,
                         const std::filesystem::path& dir);

std::string manifest_to_json(std::span<const ManifestEntry> manifest);
std::string expected_to_json(const std::map<std::string, ExpectedDiff>& expected);
std::map<std::string, ExpectedDiff> expected_from_json(std::string_view text);

/// In-memory index shaped like DeepSeek-V3 (61 layers, 3 dense, 256 routed
/// experts, 1 shared expert, BF16). Offsets are synthetic; there are no files.
CheckpointIndex deepseek_v3_index();

/// Two-sided relative deviation of sqrt(chi2_n / n) from 1 that holds with
/// probability >= 1 - failure (Laurent-Massart tail bounds).
double rms_concentration(std::uint64_t n, double failure = 1e-3);

}  // namespace aoe::fixtures
