#include "aoe/taxonomy.hpp"

#include <algorithm>
#include <map>
#include <tuple>

#include <fmt/format.h>

#include "aoe/error.hpp"

namespace aoe {

namespace {

constexpr std::array<std::string_view, 7> kGroupNames{
    "Attention", "RoutedExpertMLP", "SharedExpertMLP", "ExpertGate", "DenseMLP", "EmbeddingNormHead", "Other"};

bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_ident(char c) { return is_digit(c) || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }

std::optional<std::uint32_t> parse_index(std::string_view digits) {
  std::uint64_t v = 0;
  for (char c : digits) {
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
    if (v > UINT32_MAX) return std::nullopt;
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string_view to_string(Group g) noexcept { return kGroupNames[static_cast<std::size_t>(g)]; }

Group parse_group(std::string_view name) {
  for (std::size_t i = 0; i < kGroupNames.size(); ++i) {
    if (kGroupNames[i] == name) return static_cast<Group>(i);
  }
  throw ValidationError(fmt::format("unknown tensor group '{}'", name));
}

bool is_per_layer(Group g) noexcept { return g != Group::EmbeddingNormHead && g != Group::Other; }

NamePattern::NamePattern(std::string pattern) : text_(std::move(pattern)) {
  std::string_view p = text_;
  std::string literal;
  auto flush = [&] {
    if (!literal.empty()) tokens_.push_back({Kind::Literal, std::exchange(literal, {})});
  };
  while (!p.empty()) {
    if (p.front() == '*') {
      flush();
      if (tokens_.empty() || tokens_.back().kind != Kind::Star) tokens_.push_back({Kind::Star, {}});
      p.remove_prefix(1);
    } else if (p.front() == '{') {
      const auto close = p.find('}');
      if (close == std::string_view::npos) throw ValidationError(fmt::format("pattern '{}': unclosed '{{'", text_));
      const auto slot = p.substr(1, close - 1);
      flush();
      if (slot == "layer") {
        tokens_.push_back({Kind::Layer, {}});
      } else if (slot == "expert") {
        tokens_.push_back({Kind::Expert, {}});
      } else if (slot == "proj") {
        tokens_.push_back({Kind::Proj, {}});
      } else {
        throw ValidationError(fmt::format("pattern '{}': unknown capture '{{{}}}'", text_, slot));
      }
      p.remove_prefix(close + 1);
    } else {
      literal.push_back(p.front());
      p.remove_prefix(1);
    }
  }
  flush();
}

bool NamePattern::captures_layer() const noexcept {
  return std::any_of(tokens_.begin(), tokens_.end(), [](const Token& t) { return t.kind == Kind::Layer; });
}

bool NamePattern::captures_expert() const noexcept {
  return std::any_of(tokens_.begin(), tokens_.end(), [](const Token& t) { return t.kind == Kind::Expert; });
}

bool NamePattern::match(std::string_view name, Captures* captures) const {
  Captures local;
  const bool ok = match_from(0, name, local);
  if (ok && captures != nullptr) *captures = std::move(local);
  return ok;
}

bool NamePattern::match_from(std::size_t tok, std::string_view rest, Captures& c) const {
  if (tok == tokens_.size()) return rest.empty();
  const Token& t = tokens_[tok];
  switch (t.kind) {
    case Kind::Literal:
      return rest.starts_with(t.literal) && match_from(tok + 1, rest.substr(t.literal.size()), c);
    case Kind::Star:
      for (std::size_t k = 0; k <= rest.size(); ++k) {
        if (match_from(tok + 1, rest.substr(k), c)) return true;
      }
      return false;
    case Kind::Layer:
    case Kind::Expert:
    case Kind::Proj: {
      const auto cls = t.kind == Kind::Proj ? is_ident : is_digit;
      std::size_t run = 0;
      while (run < rest.size() && cls(rest[run])) ++run;
      for (std::size_t k = run; k >= 1; --k) {
        if (!match_from(tok + 1, rest.substr(k), c)) continue;
        const auto value = rest.substr(0, k);
        if (t.kind == Kind::Proj) {
          c.proj = std::string(value);
        } else {
          auto idx = parse_index(value);
          if (!idx) return false;
          (t.kind == Kind::Layer ? c.layer : c.expert) = idx;
        }
        return true;
      }
      return false;
    }
  }
  return false;
}

NamingRule::NamingRule(std::string p, Group g) : pattern(std::move(p)), group(g) {
  if (group == Group::RoutedExpertMLP && !pattern.captures_expert()) {
    throw ValidationError(fmt::format("rule '{}': RoutedExpertMLP rules must capture {{expert}}", pattern.text()));
  }
  if (is_per_layer(group) && !pattern.captures_layer()) {
    throw ValidationError(fmt::format("rule '{}': {} rules must capture {{layer}}", pattern.text(), to_string(group)));
  }
}

NamingScheme NamingScheme::deepseek_v3() {
  NamingScheme s;
  s.rules.emplace_back("model.layers.{layer}.mlp.experts.{expert}.{proj}_proj.*", Group::RoutedExpertMLP);
  s.rules.emplace_back("model.layers.{layer}.mlp.shared_experts.{proj}_proj.*", Group::SharedExpertMLP);
  s.rules.emplace_back("model.layers.{layer}.mlp.gate.*", Group::ExpertGate);
  s.rules.emplace_back("model.layers.{layer}.mlp.{proj}_proj.*", Group::DenseMLP);
  s.rules.emplace_back("model.layers.*layernorm*", Group::EmbeddingNormHead);
  s.rules.emplace_back("model.layers.{layer}.self_attn.{proj}.*", Group::Attention);
  s.rules.emplace_back("model.embed_tokens.*", Group::EmbeddingNormHead);
  s.rules.emplace_back("model.norm.*", Group::EmbeddingNormHead);
  s.rules.emplace_back("lm_head.*", Group::EmbeddingNormHead);
  return s;
}

TensorCategory classify(std::string_view name, const NamingScheme& scheme) {
  for (const auto& rule : scheme.rules) {
    NamePattern::Captures c;
    if (!rule.pattern.match(name, &c)) continue;
    TensorCategory cat;
    cat.group = rule.group;
    if (is_per_layer(rule.group)) {
      cat.layer = c.layer;
      cat.projection = std::move(c.proj);
    }
    if (rule.group == Group::RoutedExpertMLP) cat.expert = c.expert;
    return cat;
  }
  return {};
}

bool in_subset(const TensorCategory& category, const SubsetSpec& spec) {
  switch (spec.mode) {
    case SubsetSpec::Mode::Full:
      return true;
    case SubsetSpec::Mode::ExpertOnly:
      return category.group == Group::RoutedExpertMLP;
    case SubsetSpec::Mode::Custom:
      return spec.groups.contains(category.group);
  }
  return false;
}

bool in_subset(std::string_view name, const TensorCategory& category, const SubsetSpec& spec) {
  if (spec.mode == SubsetSpec::Mode::Custom) {
    for (const auto& p : spec.patterns) {
      if (NamePattern(p.pattern).match(name)) return p.include;
    }
  }
  return in_subset(category, spec);
}

std::string describe(const SubsetSpec& spec) {
  switch (spec.mode) {
    case SubsetSpec::Mode::Full:
      return "full";
    case SubsetSpec::Mode::ExpertOnly:
      return "experts-only";
    case SubsetSpec::Mode::Custom:
      break;
  }
  std::vector<std::string> groups;
  for (auto g : spec.groups) groups.emplace_back(to_string(g));
  std::vector<std::string> patterns;
  for (const auto& p : spec.patterns) patterns.push_back(fmt::format("{}{}", p.include ? '+' : '-', p.pattern));
  return fmt::format("custom:{};{}", fmt::join(groups, ","), fmt::join(patterns, ","));
}

std::vector<CensusEntry> census(const CheckpointIndex& index, const NamingScheme& scheme) {
  // Key: (has no layer, layer, group) so layered entries come first.
  std::map<std::tuple<bool, std::uint32_t, Group>, CensusEntry> acc;
  for (const auto& t : index.tensors) {
    const auto cat = classify(t.name, scheme);
    auto& e = acc[{!cat.layer.has_value(), cat.layer.value_or(0), cat.group}];
    e.group = cat.group;
    e.layer = cat.layer;
    e.tensors += 1;
    e.parameters += t.numel();
  }
  std::vector<CensusEntry> out;
  out.reserve(acc.size());
  for (auto& [_, e] : acc) out.push_back(e);
  return out;
}

}  // namespace aoe
