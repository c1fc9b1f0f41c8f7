#include "json_convert.hpp"

namespace aoe {

using detail::json;
using detail::ordered_json;

namespace {

ordered_json inputs_to_json(const std::vector<InputFingerprint>& inputs) {
  ordered_json out = ordered_json::array();
  for (const auto& i : inputs) out.push_back({{"path", i.path}, {"header_sha256", i.header_sha256}});
  return out;
}

std::vector<InputFingerprint> inputs_from_json(const json& j) {
  std::vector<InputFingerprint> out;
  for (const auto& i : j) {
    out.push_back({detail::require(i, "path", "inputs").get<std::string>(),
                   detail::require(i, "header_sha256", "inputs").get<std::string>()});
  }
  return out;
}

CopyReason reason_from_string(const std::string& s) {
  if (s == "none") return CopyReason::None;
  if (s == "not_in_subset") return CopyReason::NotInSubset;
  if (s == "below_threshold") return CopyReason::BelowThreshold;
  throw ValidationError(fmt::format("plan: unknown reason '{}'", s));
}

}  // namespace

std::string plan_to_json(const MergePlan& plan) {
  ordered_json j;
  j["format"] = "aoe-plan/1";
  j["recipe"] = detail::config_to_json(plan.config);
  j["inputs"] = inputs_to_json(plan.inputs);
  std::size_t merged = 0;
  for (const auto& d : plan.decisions) merged += d.action == Action::Merge ? 1 : 0;
  j["summary"] = {{"tensors", plan.decisions.size()}, {"merge", merged}, {"copy", plan.decisions.size() - merged}};
  ordered_json decisions = ordered_json::array();
  for (const auto& d : plan.decisions) {
    ordered_json e;
    e["name"] = d.name;
    e["category"] = detail::category_to_json(d.category);
    e["action"] = std::string(to_string(d.action));
    e["reason"] = std::string(to_string(d.reason));
    e["max_diff"] = detail::real_to_json(d.max_diff);
    if (d.action == Action::Merge) {
      ordered_json ls = ordered_json::array();
      for (double l : d.lambdas) ls.push_back(detail::real_to_json(l));
      e["lambdas"] = std::move(ls);
      e["base_preserving"] = d.base_preserving;
    }
    decisions.push_back(std::move(e));
  }
  j["decisions"] = std::move(decisions);
  return j.dump(1) + "\n";
}

MergePlan plan_from_json(std::string_view text) {
  try {
    const json j = detail::parse_json_text(text, "plan");
    if (!j.is_object() || j.value("format", "") != "aoe-plan/1") throw ValidationError("plan: not an aoe-plan/1 document");
    MergePlan plan;
    plan.config = detail::config_from_json(detail::require(j, "recipe", "plan"), {});
    plan.inputs = inputs_from_json(detail::require(j, "inputs", "plan"));
    for (const auto& e : detail::require(j, "decisions", "plan")) {
      MergeDecision d;
      d.name = detail::require(e, "name", "decision").get<std::string>();
      d.category = detail::category_from_json(detail::require(e, "category", "decision"));
      const auto action = detail::require(e, "action", "decision").get<std::string>();
      if (action == "merge") {
        d.action = Action::Merge;
      } else if (action == "copy") {
        d.action = Action::CopyBase;
      } else {
        throw ValidationError(fmt::format("plan: unknown action '{}'", action));
      }
      d.reason = reason_from_string(detail::require(e, "reason", "decision").get<std::string>());
      d.max_diff = detail::real_from_json(detail::require(e, "max_diff", "decision"), "max_diff");
      if (d.action == Action::Merge) {
        for (const auto& l : detail::require(e, "lambdas", "decision")) d.lambdas.push_back(detail::real_from_json(l, "lambdas"));
        d.base_preserving = e.value("base_preserving", false);
      }
      plan.decisions.push_back(std::move(d));
    }
    return plan;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("plan: {}", e.what()));
  }
}

std::string report_to_json(const MergeReport& r) {
  ordered_json j;
  j["format"] = "aoe-report/1";
  j["tool_version"] = std::string(kToolVersion);
  j["dry_run"] = r.dry_run;
  j["output_dir"] = r.output_dir;
  j["recipe"] = detail::config_to_json(r.config);
  j["inputs"] = inputs_to_json(r.inputs);
  j["totals"] = {{"tensors", r.tensors.size()}, {"merged", r.merged}, {"copied", r.copied},
                 {"non_finite_warnings", r.non_finite_warnings}};
  ordered_json groups = ordered_json::object();
  for (const auto& [g, c] : r.by_group) groups[std::string(to_string(g))] = {{"merged", c.merged}, {"copied", c.copied}};
  j["by_group"] = std::move(groups);
  ordered_json warnings = ordered_json::array();
  ordered_json tensors = ordered_json::array();
  for (const auto& t : r.tensors) {
    ordered_json e = {{"name", t.name}, {"action", std::string(to_string(t.action))}, {"reason", std::string(to_string(t.reason))}};
    if (t.non_finite_inputs > 0 || t.non_finite_output > 0) {
      warnings.push_back({{"name", t.name}, {"non_finite_inputs", t.non_finite_inputs}, {"non_finite_output", t.non_finite_output}});
    }
    tensors.push_back(std::move(e));
  }
  j["warnings"] = std::move(warnings);
  j["output_files"] = r.output_files;
  j["seconds"] = r.seconds;
  j["tensors"] = std::move(tensors);
  return j.dump(1) + "\n";
}

void save_diff_cache(const DiffCache& cache, const std::filesystem::path& file) {
  ordered_json j;
  j["format"] = "aoe-diff-cache/1";
  j["inputs"] = inputs_to_json(cache.inputs);
  ordered_json records = ordered_json::array();
  for (const auto& r : cache.records) {
    ordered_json per = ordered_json::array();
    for (double d : r.per_model) per.push_back(detail::real_to_json(d));
    records.push_back({{"name", r.name},
                       {"category", detail::category_to_json(r.category)},
                       {"per_model", std::move(per)},
                       {"max_diff", detail::real_to_json(r.max_diff)}});
  }
  j["records"] = std::move(records);
  detail::write_text_file(file, j.dump(1) + "\n");
}

DiffCache load_diff_cache(const std::filesystem::path& file) {
  try {
    const json j = detail::read_json_file(file);
    if (!j.is_object() || j.value("format", "") != "aoe-diff-cache/1") {
      throw ValidationError(fmt::format("'{}' is not an aoe-diff-cache/1 document", file.string()));
    }
    DiffCache cache;
    cache.inputs = inputs_from_json(detail::require(j, "inputs", "diff cache"));
    for (const auto& e : detail::require(j, "records", "diff cache")) {
      DiffRecord r;
      r.name = detail::require(e, "name", "diff record").get<std::string>();
      r.category = detail::category_from_json(detail::require(e, "category", "diff record"));
      for (const auto& d : detail::require(e, "per_model", "diff record")) r.per_model.push_back(detail::real_from_json(d, "per_model"));
      r.max_diff = detail::real_from_json(detail::require(e, "max_diff", "diff record"), "max_diff");
      cache.records.push_back(std::move(r));
    }
    return cache;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("diff cache '{}': {}", file.string(), e.what()));
  }
}

}  // namespace aoe
