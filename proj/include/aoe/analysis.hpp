#pragma once

// Diagnostics over diff records and model transcripts, emitted as data.

#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aoe/merge.hpp"

namespace aoe {

enum class Aggregate { Mean, Max };

/// Layer x subgroup table of max_diff values. Columns are
/// "<group>.<projection>" labels (attention, routed_experts, shared_experts,
/// router_gate, dense_mlp) ordered by group, then projection name.
struct HeatmapTable {
  std::vector<std::uint32_t> layers;  // 0 .. highest layer seen
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> cells;  // [row][column]; nullopt: absent

  std::string to_csv() const;
};

/// Several records per cell (routed experts, multi-tensor projections) are
/// reduced with `aggregate`.
HeatmapTable emit_heatmap(std::span<const DiffRecord> diffs, Aggregate aggregate = Aggregate::Mean);

struct HistogramSpec {
  std::vector<double> edges;  // strictly increasing; bins are [lo, hi), the last one closed
  double cutoff = 1e-3;
};

struct HistogramBin {
  Group group = Group::Other;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

struct Histogram {
  std::vector<HistogramBin> bins;  // per group present in the input, in group order
  std::size_t included = 0;
  std::size_t excluded_below_cutoff = 0;
  std::size_t excluded_out_of_range = 0;  // >= cutoff but outside the edges, or NaN

  std::size_t excluded() const noexcept { return excluded_below_cutoff + excluded_out_of_range; }
  std::string to_csv() const;
};

Histogram emit_histogram(std::span<const DiffRecord> diffs, const HistogramSpec& spec);

struct ResponseResult {
  std::string id;
  bool opened = false;  // starts with the open tag
  bool closed = false;  // contains the close tag
  std::optional<std::size_t> close_byte_offset;
};

struct ReasoningStats {
  std::size_t total = 0;
  std::size_t with_closing_tag = 0;
  std::size_t with_opening_tag = 0;
  std::size_t malformed = 0;
  std::vector<std::string> malformed_lines;
  std::vector<ResponseResult> responses;
  std::string open_tag;
  std::string close_tag;

  /// Undefined (nullopt) when no responses were read.
  std::optional<double> frequency() const noexcept;
  std::string to_json() const;
};

/// Reads newline-delimited JSON records {"id": ..., "response": ...}.
/// Malformed lines are counted and skipped.
ReasoningStats reasoning_frequency(std::istream& transcripts, std::string_view open_tag = "<think>",
                                   std::string_view close_tag = "</think>");

}  // namespace aoe
