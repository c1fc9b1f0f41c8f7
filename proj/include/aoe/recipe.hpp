#pragma once

// Recipe files: the declarative JSON record of a merge. See docs/formats.md.

#include <filesystem>
#include <string>
#include <string_view>

#include "aoe/merge.hpp"

namespace aoe {

/// Parses a recipe. Relative model paths resolve against `base_dir`.
/// Unknown keys and invalid values throw ValidationError naming the field.
MergeConfig recipe_from_json(std::string_view text, const std::filesystem::path& base_dir = {});
MergeConfig load_recipe(const std::filesystem::path& file);
std::string recipe_to_json(const MergeConfig& config);

/// Naming-scheme rule list in recipe syntax: [{"pattern", "group", "captures"}].
NamingScheme scheme_from_json(std::string_view text);
NamingScheme load_scheme(const std::filesystem::path& file);

/// Environment variable naming a scheme file used when none is given.
inline constexpr const char* kSchemeEnv = "AOE_SCHEME";

/// The scheme from $AOE_SCHEME, or the built-in DeepSeek-V3 rules.
NamingScheme default_scheme();

}  // namespace aoe
