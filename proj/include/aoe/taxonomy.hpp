#pragma once

// Structural classification of checkpoint tensor names and merge-subset
// membership.
//
// Pattern syntax (naming rules and subset patterns):
//   *         any run of characters, including '.'
//   {layer}   one or more digits, captured as the layer index
//   {expert}  one or more digits, captured as the routed-expert index
//   {proj}    one or more of [A-Za-z0-9_], captured as the projection label
// Everything else matches literally. Patterns must match the whole name.

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "aoe/safetensors.hpp"

namespace aoe {

enum class Group : std::uint8_t {
  Attention,
  RoutedExpertMLP,
  SharedExpertMLP,
  ExpertGate,
  DenseMLP,
  EmbeddingNormHead,
  Other,
};

inline constexpr std::array<Group, 7> kAllGroups{Group::Attention,      Group::RoutedExpertMLP,
                                                 Group::SharedExpertMLP, Group::ExpertGate,
                                                 Group::DenseMLP,       Group::EmbeddingNormHead,
                                                 Group::Other};

std::string_view to_string(Group g) noexcept;
Group parse_group(std::string_view name);
/// Groups that carry a layer index.
bool is_per_layer(Group g) noexcept;

struct TensorCategory {
  Group group = Group::Other;
  std::optional<std::uint32_t> layer;
  std::optional<std::uint32_t> expert;
  std::string projection;  // empty when the rule captured none
  bool operator==(const TensorCategory&) const = default;
};

class NamePattern {
 public:
  struct Captures {
    std::optional<std::uint32_t> layer;
    std::optional<std::uint32_t> expert;
    std::string proj;
  };

  explicit NamePattern(std::string pattern);

  bool match(std::string_view name, Captures* captures = nullptr) const;
  const std::string& text() const noexcept { return text_; }
  bool captures_layer() const noexcept;
  bool captures_expert() const noexcept;

 private:
  enum class Kind : std::uint8_t { Literal, Star, Layer, Expert, Proj };
  struct Token {
    Kind kind;
    std::string literal;
  };
  bool match_from(std::size_t tok, std::string_view rest, Captures& c) const;

  std::string text_;
  std::vector<Token> tokens_;
};

struct NamingRule {
  NamingRule(std::string pattern, Group group);
  NamePattern pattern;
  Group group;
};

struct NamingScheme {
  std::vector<NamingRule> rules;  // first match wins

  /// DeepSeek-V3 style names ("model.layers.N.mlp.experts.E.down_proj.weight").
  /// Layer norms, including the ones inside self_attn, go to EmbeddingNormHead.
  static NamingScheme deepseek_v3();
};

TensorCategory classify(std::string_view name, const NamingScheme& scheme);

struct SubsetPattern {
  std::string pattern;
  bool include = true;
  bool operator==(const SubsetPattern&) const = default;
};

struct SubsetSpec {
  enum class Mode : std::uint8_t { Full, ExpertOnly, Custom };
  Mode mode = Mode::Full;
  std::set<Group> groups;               // Custom only
  std::vector<SubsetPattern> patterns;  // Custom only; first match overrides groups

  static SubsetSpec full() { return {}; }
  static SubsetSpec expert_only() { return {Mode::ExpertOnly, {}, {}}; }
  bool operator==(const SubsetSpec&) const = default;
};

/// Group-level membership. Custom name patterns are ignored here.
bool in_subset(const TensorCategory& category, const SubsetSpec& spec);
/// Full membership test including Custom name patterns.
bool in_subset(std::string_view name, const TensorCategory& category, const SubsetSpec& spec);

/// Short description used in provenance metadata: "full", "experts-only",
/// or "custom:<groups>;<patterns>".
std::string describe(const SubsetSpec& spec);

struct CensusEntry {
  Group group = Group::Other;
  std::optional<std::uint32_t> layer;
  std::uint64_t tensors = 0;
  std::uint64_t parameters = 0;
};

/// Counts per (group, layer): layered entries by ascending layer then group,
/// followed by layer-less entries in group order.
std::vector<CensusEntry> census(const CheckpointIndex& index, const NamingScheme& scheme);

}  // namespace aoe
