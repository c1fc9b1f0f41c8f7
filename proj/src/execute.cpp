#include <chrono>
#include <unordered_map>

#include "aoe/kernels.hpp"
#include "json_convert.hpp"
#include "parallel.hpp"

namespace aoe {

Metadata provenance_metadata(const MergeConfig& config, const Metadata& base) {
  Metadata out = base;
  detail::ordered_json models = detail::ordered_json::array();
  for (const auto& m : config.models) models.push_back(m.string());
  detail::ordered_json lambdas = detail::ordered_json::array();
  for (double l : config.lambdas) lambdas.push_back(detail::real_to_json(l));
  out["aoe.base"] = config.models.empty() ? std::string() : config.models.front().string();
  out["aoe.models"] = models.dump();
  out["aoe.lambdas"] = lambdas.dump();
  out["aoe.delta"] = fmt::format("{}", config.delta);
  out["aoe.subset"] = describe(config.subset);
  out["aoe.tool_version"] = std::string(kToolVersion);
  return out;
}

namespace {

struct Produced {
  std::vector<std::byte> bytes;
  std::size_t non_finite_inputs = 0;
  std::size_t non_finite_output = 0;
};

Produced produce(const MergeDecision& d, std::span<const CheckpointIndex> models) {
  const auto& base = models.front();
  const TensorInfo& info = base.at(d.name);
  Produced out;
  if (d.action == Action::CopyBase) {
    out.bytes = read_raw(base, d.name);
    return out;
  }
  if (d.lambdas.size() != models.size()) {
    throw ValidationError(fmt::format("plan: tensor '{}' has {} weights for {} models", d.name, d.lambdas.size(), models.size()));
  }
  std::vector<TensorData> inputs;
  std::vector<double> weights;
  for (std::size_t m = 0; m < models.size(); ++m) {
    if (d.lambdas[m] == 0.0) continue;
    auto t = read_tensor(models[m], d.name);
    if (t.info.dtype != info.dtype) {
      throw ValidationError(fmt::format("dtype mismatch for '{}': model 1 {} vs model {} {}", d.name, to_string(info.dtype),
                                        m + 1, to_string(t.info.dtype)));
    }
    if (t.info.shape != info.shape) throw ValidationError(fmt::format("shape mismatch for '{}' in model {}", d.name, m + 1));
    out.non_finite_inputs += kernels::count_non_finite(t.values);
    t.raw.clear();
    t.raw.shrink_to_fit();
    inputs.push_back(std::move(t));
    weights.push_back(d.lambdas[m]);
  }
  std::vector<double> values(info.numel(), 0.0);
  if (!inputs.empty()) {
    std::vector<std::span<const double>> spans;
    for (const auto& t : inputs) spans.emplace_back(t.values);
    kernels::linear_combination(spans, weights, values);
  }
  out.non_finite_output = kernels::count_non_finite(values);
  out.bytes = kernels::encode(values, info.dtype);
  return out;
}

std::uint64_t resident_estimate(const MergeDecision& d, const TensorInfo& info) {
  if (d.action == Action::CopyBase) return info.nbytes();
  std::uint64_t active = 0;
  for (double l : d.lambdas) active += l != 0.0 ? 1 : 0;
  // decoded inputs + raw read buffer + decoded output + encoded output
  return (active + 1) * info.numel() * sizeof(double) + 2 * info.nbytes();
}

}  // namespace

MergeReport execute_merge(const MergePlan& plan, const std::filesystem::path& out_dir, const ExecOptions& options,
                          bool dry_run) {
  const auto start = std::chrono::steady_clock::now();
  plan.config.validate();

  std::vector<CheckpointIndex> models;
  for (const auto& p : plan.config.models) models.push_back(open_checkpoint(p));
  const auto now = fingerprints(models);
  if (now.size() != plan.inputs.size()) throw ValidationError("plan input list does not match the recipe's models");
  for (std::size_t i = 0; i < now.size(); ++i) {
    if (now[i].header_sha256 != plan.inputs[i].header_sha256) {
      throw ValidationError(fmt::format("input checkpoint '{}' changed since the plan was made (header hash mismatch)",
                                        now[i].path));
    }
  }
  const auto& base = models.front();

  std::unordered_map<std::string_view, const MergeDecision*> by_name;
  for (const auto& d : plan.decisions) {
    if (base.find(d.name) == nullptr) throw ValidationError(fmt::format("plan names unknown tensor '{}'", d.name));
    if (!by_name.emplace(d.name, &d).second) throw ValidationError(fmt::format("plan lists tensor '{}' twice", d.name));
  }
  if (by_name.size() != base.tensors.size()) {
    throw ValidationError(fmt::format("plan covers {} of {} base tensors", by_name.size(), base.tensors.size()));
  }

  OutputLayout layout;
  if (plan.config.output.mode == OutputPolicy::Mode::MirrorSource) {
    layout = mirror_layout(base);
  } else {
    std::vector<PlannedTensor> planned;
    for (const auto& t : base.tensors) planned.push_back({t.name, t.dtype, t.shape});
    layout = sequential_layout(planned, plan.config.output);
  }
  std::vector<const MergeDecision*> order;
  for (const auto& s : layout.shards) {
    for (const auto& t : s.tensors) order.push_back(by_name.at(t.name));
  }

  MergeReport report;
  report.config = plan.config;
  report.inputs = plan.inputs;
  report.output_dir = out_dir.string();
  report.dry_run = dry_run;
  for (const auto& s : layout.shards) report.output_files.push_back(s.filename);
  if (!layout.index_file.empty()) report.output_files.push_back(layout.index_file);
  for (const auto* d : order) {
    auto& g = report.by_group[d->category.group];
    if (d->action == Action::Merge) {
      ++g.merged;
      ++report.merged;
    } else {
      ++g.copied;
      ++report.copied;
    }
    report.tensors.push_back({d->name, d->action, d->reason, 0, 0});
  }
  if (dry_run) {
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
  }

  CheckpointWriter writer(out_dir, layout, provenance_metadata(plan.config, base.metadata));
  std::size_t next = 0;
  while (next < order.size()) {
    // Batch consecutive tensors within the residency budget; always at least one.
    std::size_t end = next;
    std::uint64_t batch_bytes = 0;
    while (end < order.size()) {
      const auto est = resident_estimate(*order[end], base.at(order[end]->name));
      if (end > next && batch_bytes + est > options.max_resident_bytes) break;
      batch_bytes += est;
      ++end;
    }
    std::vector<Produced> results(end - next);
    detail::parallel_for(results.size(), options.threads, [&](std::size_t k) {
      const auto& d = *order[next + k];
      try {
        results[k] = produce(d, models);
      } catch (const ValidationError&) {
        throw;
      } catch (const std::exception& e) {
        throw Error(fmt::format("while producing tensor '{}': {}", d.name, e.what()));
      }
    });
    for (std::size_t k = 0; k < results.size(); ++k) {
      auto& outcome = report.tensors[next + k];
      outcome.non_finite_inputs = results[k].non_finite_inputs;
      outcome.non_finite_output = results[k].non_finite_output;
      if (outcome.non_finite_inputs > 0) ++report.non_finite_warnings;
      writer.append(order[next + k]->name, results[k].bytes);
    }
    next = end;
  }
  writer.finish();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace aoe
