#include "aoe/recipe.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json_convert.hpp"

namespace aoe {

namespace detail {

namespace {

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ValidationError(fmt::format("{}: unknown key '{}'", where, key));
  }
}

std::vector<double> reals(const json& j, std::string_view field) {
  if (!j.is_array()) throw ValidationError(fmt::format("'{}' must be an array of numbers", field));
  std::vector<double> out;
  for (const auto& v : j) out.push_back(real_from_json(v, field));
  return out;
}

ordered_json reals_to_json(const std::vector<double>& xs) {
  ordered_json out = ordered_json::array();
  for (double x : xs) out.push_back(real_to_json(x));
  return out;
}

std::string_view policy_name(OutputPolicy::Mode m) {
  return m == OutputPolicy::Mode::MirrorSource ? "mirror-source" : "sequential";
}

std::vector<std::string> capture_names(const NamePattern& p) {
  std::vector<std::string> out;
  if (p.captures_layer()) out.emplace_back("layer");
  if (p.captures_expert()) out.emplace_back("expert");
  if (p.text().find("{proj}") != std::string::npos) out.emplace_back("proj");
  return out;
}

}  // namespace

json parse_json_text(std::string_view text, std::string_view what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: malformed JSON: {}", what, e.what()));
  }
}

json read_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(fmt::format("cannot open '{}'", file.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), file.string());
}

void write_text_file(const std::filesystem::path& file, std::string_view text) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(fmt::format("I/O failure writing '{}'", file.string()));
}

ordered_json category_to_json(const TensorCategory& c) {
  ordered_json j;
  j["group"] = std::string(to_string(c.group));
  j["layer"] = c.layer ? ordered_json(*c.layer) : ordered_json(nullptr);
  j["expert"] = c.expert ? ordered_json(*c.expert) : ordered_json(nullptr);
  j["projection"] = c.projection;
  return j;
}

TensorCategory category_from_json(const json& j) {
  TensorCategory c;
  c.group = parse_group(require(j, "group", "category").get<std::string>());
  if (j.contains("layer") && !j.at("layer").is_null()) c.layer = j.at("layer").get<std::uint32_t>();
  if (j.contains("expert") && !j.at("expert").is_null()) c.expert = j.at("expert").get<std::uint32_t>();
  if (j.contains("projection")) c.projection = j.at("projection").get<std::string>();
  return c;
}

ordered_json scheme_to_json(const NamingScheme& scheme) {
  ordered_json out = ordered_json::array();
  for (const auto& r : scheme.rules) {
    out.push_back({{"pattern", r.pattern.text()},
                   {"group", std::string(to_string(r.group))},
                   {"captures", capture_names(r.pattern)}});
  }
  return out;
}

NamingScheme scheme_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("'scheme' must be an array of rules");
  NamingScheme s;
  for (const auto& r : j) {
    if (!r.is_object()) throw ValidationError("'scheme' rules must be objects");
    reject_unknown(r, {"pattern", "group", "captures"}, "scheme rule");
    const auto& pat = require(r, "pattern", "scheme rule");
    const auto& grp = require(r, "group", "scheme rule");
    if (!pat.is_string() || !grp.is_string()) throw ValidationError("scheme rule: 'pattern' and 'group' must be strings");
    NamingRule rule(pat.get<std::string>(), parse_group(grp.get<std::string>()));
    if (r.contains("captures")) {
      auto declared = r.at("captures").get<std::vector<std::string>>();
      std::sort(declared.begin(), declared.end());
      auto actual = capture_names(rule.pattern);
      std::sort(actual.begin(), actual.end());
      if (declared != actual) {
        throw ValidationError(fmt::format("scheme rule '{}': 'captures' does not match the pattern", rule.pattern.text()));
      }
    }
    s.rules.push_back(std::move(rule));
  }
  return s;
}

ordered_json config_to_json(const MergeConfig& c) {
  ordered_json j;
  ordered_json models = ordered_json::array();
  for (const auto& m : c.models) models.push_back(m.string());
  j["models"] = std::move(models);
  j["lambdas"] = reals_to_json(c.lambdas);
  j["delta"] = real_to_json(c.delta);
  switch (c.subset.mode) {
    case SubsetSpec::Mode::Full:
      j["subset"] = "full";
      break;
    case SubsetSpec::Mode::ExpertOnly:
      j["subset"] = "experts-only";
      break;
    case SubsetSpec::Mode::Custom: {
      ordered_json groups = ordered_json::array();
      for (auto g : c.subset.groups) groups.push_back(std::string(to_string(g)));
      ordered_json patterns = ordered_json::array();
      for (const auto& p : c.subset.patterns) patterns.push_back({{"pattern", p.pattern}, {"include", p.include}});
      j["subset"] = {{"groups", std::move(groups)}, {"patterns", std::move(patterns)}};
      break;
    }
  }
  j["scheme"] = scheme_to_json(c.scheme);
  j["convex_required"] = c.convex_required;
  j["output"] = {{"policy", std::string(policy_name(c.output.mode))},
                 {"max_shard_bytes", c.output.max_shard_bytes},
                 {"name_template", c.output.name_template}};
  if (!c.lambda_overrides.empty()) {
    ordered_json ov = ordered_json::object();
    for (const auto& [name, ls] : c.lambda_overrides) ov[name] = reals_to_json(ls);
    j["lambda_overrides"] = std::move(ov);
  }
  return j;
}

MergeConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ValidationError("recipe must be a JSON object");
  reject_unknown(j, {"models", "lambdas", "delta", "subset", "scheme", "convex_required", "output", "lambda_overrides"},
                 "recipe");
  MergeConfig c;
  const auto& models = require(j, "models", "recipe");
  if (!models.is_array()) throw ValidationError("'models' must be an array of paths");
  for (const auto& m : models) {
    if (!m.is_string()) throw ValidationError("'models' entries must be strings");
    std::filesystem::path p = m.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    c.models.push_back(p.lexically_normal());
  }
  c.lambdas = reals(require(j, "lambdas", "recipe"), "lambdas");
  if (j.contains("delta")) c.delta = real_from_json(j.at("delta"), "delta");

  if (j.contains("subset")) {
    const auto& s = j.at("subset");
    if (s.is_string()) {
      const auto mode = s.get<std::string>();
      if (mode == "full") {
        c.subset = SubsetSpec::full();
      } else if (mode == "experts-only") {
        c.subset = SubsetSpec::expert_only();
      } else {
        throw ValidationError(fmt::format("'subset': unknown mode '{}' (full | experts-only | {{groups, patterns}})", mode));
      }
    } else if (s.is_object()) {
      reject_unknown(s, {"groups", "patterns"}, "subset");
      c.subset.mode = SubsetSpec::Mode::Custom;
      if (s.contains("groups")) {
        for (const auto& g : s.at("groups")) c.subset.groups.insert(parse_group(g.get<std::string>()));
      }
      if (s.contains("patterns")) {
        for (const auto& p : s.at("patterns")) {
          reject_unknown(p, {"pattern", "include"}, "subset pattern");
          SubsetPattern sp;
          sp.pattern = require(p, "pattern", "subset pattern").get<std::string>();
          NamePattern check(sp.pattern);
          if (p.contains("include")) sp.include = p.at("include").get<bool>();
          c.subset.patterns.push_back(std::move(sp));
        }
      }
    } else {
      throw ValidationError("'subset' must be a string or an object");
    }
  }
  c.scheme = j.contains("scheme") ? scheme_from_json(j.at("scheme")) : default_scheme();
  if (j.contains("convex_required")) {
    if (!j.at("convex_required").is_boolean()) throw ValidationError("'convex_required' must be a boolean");
    c.convex_required = j.at("convex_required").get<bool>();
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    if (!o.is_object()) throw ValidationError("'output' must be an object");
    reject_unknown(o, {"policy", "max_shard_bytes", "name_template"}, "output");
    if (o.contains("policy")) {
      const auto p = o.at("policy").get<std::string>();
      if (p == "mirror-source") {
        c.output.mode = OutputPolicy::Mode::MirrorSource;
      } else if (p == "sequential") {
        c.output.mode = OutputPolicy::Mode::Sequential;
      } else {
        throw ValidationError(fmt::format("'output.policy': unknown policy '{}'", p));
      }
    }
    if (o.contains("max_shard_bytes")) {
      if (!o.at("max_shard_bytes").is_number_unsigned()) {
        throw ValidationError("'output.max_shard_bytes' must be a positive integer");
      }
      c.output.max_shard_bytes = o.at("max_shard_bytes").get<std::uint64_t>();
    }
    if (o.contains("name_template")) c.output.name_template = o.at("name_template").get<std::string>();
  }
  if (j.contains("lambda_overrides")) {
    const auto& ov = j.at("lambda_overrides");
    if (!ov.is_object()) throw ValidationError("'lambda_overrides' must be an object");
    for (const auto& [name, ls] : ov.items()) {
      c.lambda_overrides.emplace(name, reals(ls, fmt::format("lambda_overrides.{}", name)));
    }
  }
  c.validate();
  return c;
}

}  // namespace detail

MergeConfig recipe_from_json(std::string_view text, const std::filesystem::path& base_dir) {
  try {
    return detail::config_from_json(detail::parse_json_text(text, "recipe"), base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("recipe: {}", e.what()));
  }
}

MergeConfig load_recipe(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(fmt::format("cannot open recipe '{}'", file.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return recipe_from_json(ss.str(), file.parent_path());
}

std::string recipe_to_json(const MergeConfig& config) { return detail::config_to_json(config).dump(2) + "\n"; }

NamingScheme scheme_from_json(std::string_view text) {
  try {
    return detail::scheme_from_json(detail::parse_json_text(text, "scheme"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("scheme: {}", e.what()));
  }
}

NamingScheme load_scheme(const std::filesystem::path& file) {
  try {
    return detail::scheme_from_json(detail::read_json_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("scheme '{}': {}", file.string(), e.what()));
  }
}

NamingScheme default_scheme() {
  const char* env = std::getenv(kSchemeEnv);
  if (env != nullptr && *env != '\0') return load_scheme(env);
  return NamingScheme::deepseek_v3();
}

}  // namespace aoe
