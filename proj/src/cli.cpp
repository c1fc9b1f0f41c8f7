#include "aoe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <omp.h>

#include "aoe/analysis.hpp"
#include "aoe/error.hpp"
#include "aoe/fixtures.hpp"
#include "aoe/recipe.hpp"
#include "json_convert.hpp"

namespace aoe::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  int threads = 0;
  std::uint64_t max_resident = std::uint64_t{4} << 30;

  ExecOptions exec() const {
    if (threads > 0) omp_set_num_threads(threads);
    return {threads, max_resident};
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--threads", c.threads, "Worker threads (0: OpenMP default)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--max-resident-bytes", c.max_resident, "Cap on concurrently resident tensor bytes")
      ->check(CLI::PositiveNumber);
}

std::vector<CheckpointIndex> open_all(const std::vector<fs::path>& paths) {
  std::vector<CheckpointIndex> out;
  for (const auto& p : paths) out.push_back(open_checkpoint(p));
  return out;
}

void write_or_print(const std::string& path, std::string_view text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    detail::write_text_file(path, text);
  }
}

struct Stats {
  std::size_t count = 0;
  double min = 0, median = 0, max = 0;
};

Stats summarize(std::vector<double> v) {
  Stats s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  const auto mid = v.size() / 2;
  s.median = v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  return s;
}

std::map<Group, Stats> per_group_stats(std::span<const DiffRecord> diffs) {
  std::map<Group, std::vector<double>> values;
  for (const auto& d : diffs) values[d.category.group].push_back(d.max_diff);
  std::map<Group, Stats> out;
  for (auto& [g, v] : values) out[g] = summarize(std::move(v));
  return out;
}

/// Loads diffs from `cache_path` when it matches the models, otherwise
/// computes them and (if a path was given) refreshes the cache.
std::vector<DiffRecord> diffs_for(std::span<const CheckpointIndex> models, const NamingScheme& scheme,
                                  const std::string& cache_path, const ExecOptions& exec, std::ostream& err) {
  if (!cache_path.empty() && fs::exists(cache_path)) {
    auto cache = load_diff_cache(cache_path);
    if (cache_matches(cache, models)) {
      err << "using diff cache " << cache_path << "\n";
      reclassify(cache.records, scheme);
      return std::move(cache.records);
    }
    err << "diff cache " << cache_path << " is stale; recomputing\n";
  }
  err << "computing diffs over " << models.front().size() << " tensors\n";
  auto diffs = compute_diffs(models, scheme, exec);
  if (!cache_path.empty()) save_diff_cache({fingerprints(models), diffs}, cache_path);
  return diffs;
}

void apply_overrides(MergeConfig& config, const std::optional<double>& delta, const std::vector<double>& lambdas) {
  if (delta) config.delta = *delta;
  if (!lambdas.empty()) config.lambdas = lambdas;
  config.validate();
}

void print_plan_table(const MergePlan& plan, std::ostream& out) {
  std::map<Group, GroupCounts> counts;
  std::size_t not_in_subset = 0;
  std::size_t below = 0;
  std::size_t preserving = 0;
  std::vector<double> gated;
  for (const auto& d : plan.decisions) {
    auto& c = counts[d.category.group];
    if (d.action == Action::Merge) {
      ++c.merged;
      preserving += d.base_preserving ? 1 : 0;
    } else {
      ++c.copied;
    }
    if (d.reason == CopyReason::NotInSubset) {
      ++not_in_subset;
    } else {
      gated.push_back(d.max_diff);
      below += d.reason == CopyReason::BelowThreshold ? 1 : 0;
    }
  }
  out << fmt::format("{:<18} {:>8} {:>8}\n", "group", "merge", "copy");
  for (const auto& [g, c] : counts) out << fmt::format("{:<18} {:>8} {:>8}\n", to_string(g), c.merged, c.copied);
  const auto s = summarize(gated);
  out << fmt::format("delta gate: delta={} in-subset={} below-threshold={} not-in-subset={}\n", plan.config.delta,
                     gated.size(), below, not_in_subset);
  if (s.count > 0) out << fmt::format("in-subset max_diff: min={} median={} max={}\n", s.min, s.median, s.max);
  if (preserving > 0) {
    out << fmt::format("{} merge decisions are base-preserving (weights one-hot on the base model)\n", preserving);
  }
}

void require_empty_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (!fs::exists(dir, ec)) return;
  if (!fs::is_directory(dir, ec)) throw Error(fmt::format("output '{}' exists and is not a directory", dir.string()));
  if (!force && !fs::is_empty(dir, ec)) {
    throw Error(fmt::format("output directory '{}' is not empty (use --force)", dir.string()));
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"aoe: Mixture-of-Experts checkpoint merging and diff analysis"};
  app.name("aoe");
  app.require_subcommand(1);

  // diff
  Common diff_common;
  std::vector<fs::path> diff_models;
  std::string diff_scheme;
  std::string diff_out;
  bool diff_json = false;
  auto* diff = app.add_subcommand("diff", "Normalized Frobenius differences against the first (base) model");
  diff->add_option("models", diff_models, "Checkpoints; the first is the base")->required()->expected(2, -1);
  diff->add_option("--scheme", diff_scheme, "Naming-scheme JSON file");
  diff->add_option("--out", diff_out, "Diff cache file to write")->required();
  diff->add_flag("--json", diff_json, "Print the per-group summary as JSON");
  add_common(diff, diff_common);

  // plan
  Common plan_common;
  std::string plan_recipe, plan_cache, plan_out;
  std::optional<double> plan_delta;
  std::vector<double> plan_lambdas;
  auto* plan = app.add_subcommand("plan", "Resolve per-tensor merge decisions without writing a checkpoint");
  plan->add_option("--recipe", plan_recipe, "Recipe JSON")->required();
  plan->add_option("--diff-cache", plan_cache, "Diff cache to reuse or create");
  plan->add_option("--out", plan_out, "Plan JSON file")->required();
  plan->add_option("--delta", plan_delta, "Override the recipe's delta");
  plan->add_option("--lambda", plan_lambdas, "Override the recipe's weights")->delimiter(',');
  add_common(plan, plan_common);

  // merge
  Common merge_common;
  std::string merge_recipe, merge_plan, merge_cache, merge_out, merge_report;
  std::optional<double> merge_delta;
  std::vector<double> merge_lambdas;
  bool merge_force = false, merge_dry = false;
  auto* merge = app.add_subcommand("merge", "Write the merged checkpoint");
  auto* recipe_opt = merge->add_option("--recipe", merge_recipe, "Recipe JSON");
  auto* plan_opt = merge->add_option("--plan", merge_plan, "Plan JSON from 'aoe plan'");
  recipe_opt->excludes(plan_opt);
  merge->add_option("--diff-cache", merge_cache, "Diff cache to reuse or create (recipe mode)");
  merge->add_option("--out", merge_out, "Output directory")->required();
  merge->add_option("--report", merge_report, "Report path (default: <out>/aoe_report.json)");
  merge->add_option("--delta", merge_delta, "Override the recipe's delta")->excludes(plan_opt);
  merge->add_option("--lambda", merge_lambdas, "Override the recipe's weights")->delimiter(',')->excludes(plan_opt);
  merge->add_flag("--force", merge_force, "Allow a non-empty output directory");
  merge->add_flag("--dry-run", merge_dry, "Print the plan summary and report skeleton; write nothing");
  add_common(merge, merge_common);

  // sweep
  Common sweep_common;
  std::string sweep_recipe, sweep_cache, sweep_out;
  std::vector<double> sweep_deltas;
  auto* sweep = app.add_subcommand("sweep", "Would-merge tensor counts per category over a delta grid");
  sweep->add_option("--recipe", sweep_recipe, "Recipe JSON")->required();
  sweep->add_option("--deltas", sweep_deltas, "Comma-separated delta values")->required()->delimiter(',');
  sweep->add_option("--diff-cache", sweep_cache, "Diff cache to reuse or create");
  sweep->add_option("--out", sweep_out, "CSV file (default: stdout)");
  add_common(sweep, sweep_common);

  // report
  std::string report_cache, report_kind = "heatmap", report_agg = "mean", report_out, report_scheme;
  std::vector<double> report_edges;
  double report_cutoff = 1e-3;
  auto* report = app.add_subcommand("report", "Heatmap or histogram CSV from a diff cache");
  report->add_option("--diff-cache", report_cache, "Diff cache")->required();
  report->add_option("--kind", report_kind, "heatmap | histogram")->check(CLI::IsMember({"heatmap", "histogram"}));
  report->add_option("--aggregate", report_agg, "Expert aggregation: mean | max")->check(CLI::IsMember({"mean", "max"}));
  report->add_option("--edges", report_edges, "Histogram bin edges")->delimiter(',');
  report->add_option("--cutoff", report_cutoff, "Histogram minimum diff");
  report->add_option("--scheme", report_scheme, "Re-classify records with this naming-scheme file");
  report->add_option("--out", report_out, "CSV file (default: stdout)");

  // think-freq
  std::string tf_file, tf_open = "<think>", tf_close = "</think>", tf_out;
  auto* think = app.add_subcommand("think-freq", "Fraction of responses containing the closing think tag");
  think->add_option("transcripts", tf_file, "Newline-delimited JSON, one {id, response} per line")->required();
  think->add_option("--open-tag", tf_open, "Opening tag");
  think->add_option("--close-tag", tf_close, "Closing tag");
  think->add_option("--out", tf_out, "JSON file (default: stdout)");

  // validate
  std::string val_path;
  std::vector<fs::path> val_against;
  auto* validate = app.add_subcommand("validate", "Check checkpoint structure and cross-model compatibility");
  validate->add_option("path", val_path, "Checkpoint file or directory")->required();
  validate->add_option("--against", val_against, "Checkpoints that must share names, shapes and dtypes");

  // fixture
  std::string fx_spec, fx_out;
  bool fx_variant = false;
  auto* fixture = app.add_subcommand("fixture", "Generate a deterministic test checkpoint");
  fixture->add_option("--spec", fx_spec, "Fixture spec JSON")->required();
  fixture->add_option("--out", fx_out, "Output directory")->required();
  fixture->add_flag("--variant", fx_variant, "Apply the spec's perturbations and emit expected_diffs.json");

  std::vector<std::string> argv_store{"aoe"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInvalid;
  }

  try {
    if (*diff) {
      const auto exec = diff_common.exec();
      const auto scheme = diff_scheme.empty() ? default_scheme() : load_scheme(diff_scheme);
      const auto models = open_all(diff_models);
      const auto mismatches = validate_compatibility(models);
      if (!mismatches.empty()) {
        err << mismatches.size() << " incompatibilities:\n";
        for (const auto& m : mismatches) err << "  " << m.kind << ": " << m.tensor << (m.detail.empty() ? "" : " ") << m.detail << "\n";
        return kExitInvalid;
      }
      err << "computing diffs over " << models.front().size() << " tensors\n";
      const auto diffs = compute_diffs(models, scheme, exec);
      save_diff_cache({fingerprints(models), diffs}, diff_out);
      const auto stats = per_group_stats(diffs);
      if (diff_json) {
        detail::ordered_json j = detail::ordered_json::object();
        for (const auto& [g, s] : stats) {
          j[std::string(to_string(g))] = {{"count", s.count}, {"min", detail::real_to_json(s.min)},
                                          {"median", detail::real_to_json(s.median)}, {"max", detail::real_to_json(s.max)}};
        }
        out << j.dump(2) << "\n";
      } else {
        out << fmt::format("{:<18} {:>8} {:>14} {:>14} {:>14}\n", "group", "tensors", "min", "median", "max");
        for (const auto& [g, s] : stats) {
          out << fmt::format("{:<18} {:>8} {:>14.6g} {:>14.6g} {:>14.6g}\n", to_string(g), s.count, s.min, s.median, s.max);
        }
      }
      return kExitOk;
    }

    if (*plan) {
      const auto exec = plan_common.exec();
      auto config = load_recipe(plan_recipe);
      apply_overrides(config, plan_delta, plan_lambdas);
      const auto models = open_all(config.models);
      const auto diffs = diffs_for(models, config.scheme, plan_cache, exec, err);
      const auto p = plan_merge(config, models, diffs);
      detail::write_text_file(plan_out, plan_to_json(p));
      print_plan_table(p, out);
      return kExitOk;
    }

    if (*merge) {
      const auto exec = merge_common.exec();
      MergePlan p;
      if (!merge_plan.empty()) {
        std::ifstream in(merge_plan);
        if (!in) throw Error(fmt::format("cannot open plan '{}'", merge_plan));
        std::stringstream ss;
        ss << in.rdbuf();
        p = plan_from_json(ss.str());
      } else if (!merge_recipe.empty()) {
        auto config = load_recipe(merge_recipe);
        apply_overrides(config, merge_delta, merge_lambdas);
        const auto models = open_all(config.models);
        const auto diffs = diffs_for(models, config.scheme, merge_cache, exec, err);
        p = plan_merge(config, models, diffs);
      } else {
        throw ValidationError("merge: one of --recipe or --plan is required");
      }
      if (merge_dry) {
        print_plan_table(p, err);
        out << report_to_json(execute_merge(p, merge_out, exec, true));
        return kExitOk;
      }
      require_empty_dir(merge_out, merge_force);
      err << "merging " << p.decisions.size() << " tensors into " << merge_out << "\n";
      const auto r = execute_merge(p, merge_out, exec, false);
      const auto report_path = merge_report.empty() ? (fs::path(merge_out) / "aoe_report.json") : fs::path(merge_report);
      detail::write_text_file(report_path, report_to_json(r));
      err << fmt::format("done: {} merged, {} copied, {} non-finite warnings, {:.2f}s\n", r.merged, r.copied,
                         r.non_finite_warnings, r.seconds);
      return kExitOk;
    }

    if (*sweep) {
      const auto exec = sweep_common.exec();
      const auto config = load_recipe(sweep_recipe);
      const auto models = open_all(config.models);
      const auto diffs = diffs_for(models, config.scheme, sweep_cache, exec, err);
      write_or_print(sweep_out, sweep_to_csv(threshold_sweep(diffs, config, sweep_deltas)), out);
      return kExitOk;
    }

    if (*report) {
      if (!fs::exists(report_cache)) throw Error(fmt::format("missing diff cache '{}'", report_cache));
      auto cache = load_diff_cache(report_cache);
      if (!report_scheme.empty()) reclassify(cache.records, load_scheme(report_scheme));
      if (report_kind == "heatmap") {
        const auto agg = report_agg == "max" ? Aggregate::Max : Aggregate::Mean;
        write_or_print(report_out, emit_heatmap(cache.records, agg).to_csv(), out);
      } else {
        if (report_edges.empty()) throw ValidationError("report: --edges is required for histograms");
        const auto h = emit_histogram(cache.records, {report_edges, report_cutoff});
        write_or_print(report_out, h.to_csv(), out);
        err << fmt::format("histogram: {} included, {} below cutoff, {} outside edges\n", h.included,
                           h.excluded_below_cutoff, h.excluded_out_of_range);
      }
      return kExitOk;
    }

    if (*think) {
      std::ifstream in(tf_file);
      if (!in) throw Error(fmt::format("cannot open transcript '{}'", tf_file));
      const auto stats = reasoning_frequency(in, tf_open, tf_close);
      if (stats.malformed > 0) err << stats.malformed << " malformed records skipped\n";
      write_or_print(tf_out, stats.to_json(), out);
      return kExitOk;
    }

    if (*validate) {
      std::vector<CheckpointIndex> models;
      try {
        models.push_back(open_checkpoint(val_path, HeaderCheck::Lenient));
      } catch (const FormatError& e) {
        err << "invalid: " << e.what() << "\n";
        return kExitInvalid;
      }
      auto violations = validate_checkpoint(models.front());
      for (const auto& v : violations) {
        out << fmt::format("{}: shard={} tensor={} {}\n", v.kind, v.shard, v.tensor, v.detail);
      }
      std::size_t mismatches = 0;
      if (!val_against.empty()) {
        for (const auto& p : val_against) models.push_back(open_checkpoint(p));
        for (const auto& m : validate_compatibility(models)) {
          out << fmt::format("{}: {} {}\n", m.kind, m.tensor, m.detail);
          ++mismatches;
        }
      }
      if (violations.empty() && mismatches == 0) {
        out << fmt::format("ok: {} tensors in {} shard(s)\n", models.front().size(), models.front().shards.size());
        return kExitOk;
      }
      return kExitInvalid;
    }

    if (*fixture) {
      const auto spec = fixtures::load_spec(fx_spec);
      const auto fx = fx_variant ? fixtures::generate_variant(spec, spec.perturbations, fx_out)
                                 : fixtures::generate_base(spec, fx_out);
      err << fmt::format("wrote {} tensors in {} shard(s) to {}\n", fx.index.size(), fx.index.shards.size(), fx_out);
      return kExitOk;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace aoe::cli
