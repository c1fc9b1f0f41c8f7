#pragma once

// Merge core: per-tensor difference gates, auditable merge plans and the
// streaming executor.
//
// For every tensor l of the base model (models[0]):
//   out_l = sum_i lambda_i * W_l^(i)   if l is in the subset and
//                                      max_{i>=2} rms(W_l^(1) - W_l^(i)) > delta
//   out_l = W_l^(1)                    otherwise (raw bytes, bit-exact)

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "aoe/safetensors.hpp"
#include "aoe/taxonomy.hpp"

namespace aoe {

inline constexpr std::string_view kToolVersion = "aoe 1.0.0";

struct MergeConfig {
  std::vector<std::filesystem::path> models;  // models[0] is the base
  std::vector<double> lambdas;
  double delta = 0.0;
  SubsetSpec subset;
  NamingScheme scheme = NamingScheme::deepseek_v3();
  bool convex_required = true;
  OutputPolicy output;
  /// Optional per-tensor weights replacing `lambdas` for the named tensors.
  std::map<std::string, std::vector<double>> lambda_overrides;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

struct Mismatch {
  std::string kind;  // "missing in model N", "extra in model N", "shape mismatch", "dtype mismatch"
  std::string tensor;
  std::size_t model = 0;  // 0-based
  std::string detail;
};

/// Empty iff every model has the base's name set with identical shape and
/// dtype per name.
std::vector<Mismatch> validate_compatibility(std::span<const CheckpointIndex> models);

struct DiffRecord {
  std::string name;
  TensorCategory category;
  std::vector<double> per_model;  // one entry per model 2..n
  double max_diff = 0.0;          // 0 when n == 1; NaN if any entry is NaN
};

struct ExecOptions {
  int threads = 0;  // 0: OpenMP default
  std::uint64_t max_resident_bytes = std::uint64_t{4} << 30;
};

/// One record per base tensor, in base order. Throws ValidationError when
/// the models are incompatible.
std::vector<DiffRecord> compute_diffs(std::span<const CheckpointIndex> models, const NamingScheme& scheme,
                                      const ExecOptions& options = {});

/// Recomputes categories under `scheme`, e.g. after loading a cached diff.
void reclassify(std::span<DiffRecord> records, const NamingScheme& scheme);

struct InputFingerprint {
  std::string path;
  std::string header_sha256;
  bool operator==(const InputFingerprint&) const = default;
};

std::vector<InputFingerprint> fingerprints(std::span<const CheckpointIndex> models);

struct DiffCache {
  std::vector<InputFingerprint> inputs;
  std::vector<DiffRecord> records;
};

void save_diff_cache(const DiffCache& cache, const std::filesystem::path& file);
DiffCache load_diff_cache(const std::filesystem::path& file);
/// True when the cache was computed from exactly these checkpoints.
bool cache_matches(const DiffCache& cache, std::span<const CheckpointIndex> models);

enum class Action : std::uint8_t { Merge, CopyBase };
enum class CopyReason : std::uint8_t { None, NotInSubset, BelowThreshold };

std::string_view to_string(Action a) noexcept;
std::string_view to_string(CopyReason r) noexcept;

struct MergeDecision {
  std::string name;
  TensorCategory category;
  Action action = Action::CopyBase;
  CopyReason reason = CopyReason::None;
  double max_diff = 0.0;
  std::vector<double> lambdas;  // Merge only
  /// Merge whose weights are one-hot on the base: output provably equals base.
  bool base_preserving = false;
};

struct MergePlan {
  MergeConfig config;
  std::vector<InputFingerprint> inputs;
  std::vector<MergeDecision> decisions;  // base order, each tensor once
};

MergePlan plan_merge(const MergeConfig& config, std::span<const CheckpointIndex> models,
                     std::span<const DiffRecord> diffs);

std::string plan_to_json(const MergePlan& plan);
MergePlan plan_from_json(std::string_view text);

struct GroupCounts {
  std::size_t merged = 0;
  std::size_t copied = 0;
};

struct TensorOutcome {
  std::string name;
  Action action = Action::CopyBase;
  CopyReason reason = CopyReason::None;
  std::size_t non_finite_inputs = 0;
  std::size_t non_finite_output = 0;
};

struct MergeReport {
  MergeConfig config;
  std::vector<InputFingerprint> inputs;
  std::string output_dir;
  bool dry_run = false;
  std::map<Group, GroupCounts> by_group;
  std::size_t merged = 0;
  std::size_t copied = 0;
  std::size_t non_finite_warnings = 0;  // tensors with NaN/Inf in a merged input
  std::vector<TensorOutcome> tensors;   // output order
  std::vector<std::string> output_files;
  double seconds = 0.0;
};

/// Provenance keys added to the base metadata of merged outputs.
Metadata provenance_metadata(const MergeConfig& config, const Metadata& base);

/// Streams the plan into `out_dir`. With dry_run nothing is written and the
/// report lists what would be produced.
MergeReport execute_merge(const MergePlan& plan, const std::filesystem::path& out_dir,
                          const ExecOptions& options = {}, bool dry_run = false);

std::string report_to_json(const MergeReport& report);

struct SweepRow {
  double delta = 0.0;
  std::map<Group, std::size_t> merged;  // per group, every group present
  std::size_t total = 0;
};

/// Would-merge counts per delta, no I/O.
std::vector<SweepRow> threshold_sweep(std::span<const DiffRecord> diffs, const MergeConfig& config,
                                      std::span<const double> deltas);

std::string sweep_to_csv(std::span<const SweepRow> rows);

}  // namespace aoe
