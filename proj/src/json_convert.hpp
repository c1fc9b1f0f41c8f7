#pragma once

// nlohmann::json conversions shared by recipes, plans, reports and caches.

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "aoe/error.hpp"
#include "aoe/merge.hpp"

namespace aoe::detail {

using nlohmann::json;
using nlohmann::ordered_json;

/// JSON has no NaN/Inf; those travel as strings.
inline ordered_json real_to_json(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Infinity" : "-Infinity";
  return v;
}

inline double real_from_json(const json& j, std::string_view field) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "NaN") return std::numeric_limits<double>::quiet_NaN();
    if (s == "Infinity") return std::numeric_limits<double>::infinity();
    if (s == "-Infinity") return -std::numeric_limits<double>::infinity();
  }
  throw ValidationError(fmt::format("'{}' must be a number", field));
}

inline const json& require(const json& obj, std::string_view key, std::string_view where) {
  auto it = obj.find(std::string(key));
  if (it == obj.end()) throw ValidationError(fmt::format("{}: missing field '{}'", where, key));
  return *it;
}

ordered_json category_to_json(const TensorCategory& c);
TensorCategory category_from_json(const json& j);

ordered_json config_to_json(const MergeConfig& config);
MergeConfig config_from_json(const json& j, const std::filesystem::path& base_dir);

ordered_json scheme_to_json(const NamingScheme& scheme);
NamingScheme scheme_from_json(const json& j);

json parse_json_text(std::string_view text, std::string_view what);
json read_json_file(const std::filesystem::path& file);
void write_text_file(const std::filesystem::path& file, std::string_view text);

}  // namespace aoe::detail
