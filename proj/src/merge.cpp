#include "aoe/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "aoe/error.hpp"
#include "aoe/kernels.hpp"
#include "parallel.hpp"

namespace aoe {

namespace {

void validate_weights(const std::vector<double>& lambdas, std::size_t n, bool convex, std::string_view field) {
  if (lambdas.size() != n) {
    throw ValidationError(fmt::format("'{}': {} weights for {} models", field, lambdas.size(), n));
  }
  for (double l : lambdas) {
    if (!std::isfinite(l)) throw ValidationError(fmt::format("'{}': weights must be finite", field));
  }
  if (!convex) return;
  for (double l : lambdas) {
    if (l < 0.0) {
      throw ValidationError(fmt::format("'{}': negative weight {} needs convex_required = false", field, l));
    }
  }
  const double sum = std::accumulate(lambdas.begin(), lambdas.end(), 0.0);
  if (std::fabs(sum - 1.0) > 1e-12) {
    throw ValidationError(fmt::format("'{}': weights sum to {:.17g}, not 1 (set convex_required = false for affine weights)",
                                      field, sum));
  }
}

bool one_hot_base(const std::vector<double>& lambdas) {
  if (lambdas.empty() || lambdas.front() != 1.0) return false;
  return std::all_of(lambdas.begin() + 1, lambdas.end(), [](double l) { return l == 0.0; });
}

std::string shape_string(const std::vector<std::uint64_t>& shape) { return fmt::format("[{}]", fmt::join(shape, ",")); }

}  // namespace

void MergeConfig::validate() const {
  if (models.empty()) throw ValidationError("'models': at least one model is required");
  validate_weights(lambdas, models.size(), convex_required, "lambdas");
  if (std::isnan(delta) || delta < 0.0) throw ValidationError(fmt::format("'delta': must be >= 0, got {}", delta));
  for (const auto& [name, ls] : lambda_overrides) {
    validate_weights(ls, models.size(), convex_required, fmt::format("lambda_overrides.{}", name));
  }
  if (output.max_shard_bytes == 0) throw ValidationError("'output.max_shard_bytes' must be positive");
  if (output.mode == OutputPolicy::Mode::Sequential && output.name_template.find("{index}") == std::string::npos) {
    throw ValidationError("'output.name_template' must contain {index}");
  }
}

std::vector<Mismatch> validate_compatibility(std::span<const CheckpointIndex> models) {
  std::vector<Mismatch> out;
  if (models.empty()) return out;
  const auto& base = models.front();
  for (std::size_t m = 1; m < models.size(); ++m) {
    const auto& other = models[m];
    for (const auto& t : base.tensors) {
      const auto* o = other.find(t.name);
      if (o == nullptr) {
        out.push_back({fmt::format("missing in model {}", m + 1), t.name, m, ""});
        continue;
      }
      if (o->shape != t.shape) {
        out.push_back({"shape mismatch", t.name, m,
                       fmt::format("model 1 {} vs model {} {}", shape_string(t.shape), m + 1, shape_string(o->shape))});
      }
      if (o->dtype != t.dtype) {
        out.push_back({"dtype mismatch", t.name, m,
                       fmt::format("model 1 {} vs model {} {}", to_string(t.dtype), m + 1, to_string(o->dtype))});
      }
    }
    for (const auto& t : other.tensors) {
      if (base.find(t.name) == nullptr) out.push_back({fmt::format("extra in model {}", m + 1), t.name, m, ""});
    }
  }
  return out;
}

namespace {

void require_compatible(std::span<const CheckpointIndex> models) {
  const auto mismatches = validate_compatibility(models);
  if (mismatches.empty()) return;
  std::string msg = fmt::format("{} incompatibilities between input models:", mismatches.size());
  for (std::size_t i = 0; i < mismatches.size() && i < 20; ++i) {
    const auto& m = mismatches[i];
    msg += fmt::format("\n  {}: {}{}{}", m.kind, m.tensor, m.detail.empty() ? "" : " ", m.detail);
  }
  if (mismatches.size() > 20) msg += fmt::format("\n  ... {} more", mismatches.size() - 20);
  throw ValidationError(msg);
}

}  // namespace

std::vector<DiffRecord> compute_diffs(std::span<const CheckpointIndex> models, const NamingScheme& scheme,
                                      const ExecOptions& options) {
  if (models.empty()) throw ValidationError("compute_diffs: no models");
  require_compatible(models);
  const auto& base = models.front();
  std::vector<DiffRecord> out(base.tensors.size());
  detail::ResidencyBudget budget(options.max_resident_bytes);

  detail::parallel_for(base.tensors.size(), options.threads, [&](std::size_t k) {
    const auto& info = base.tensors[k];
    DiffRecord& rec = out[k];
    rec.name = info.name;
    rec.category = classify(info.name, scheme);
    if (models.size() == 1) return;
    if (info.numel() == 0) {
      // No elements: the tensors cannot differ.
      rec.per_model.assign(models.size() - 1, 0.0);
      return;
    }
    // Base values plus one other model at a time, decoded and raw.
    detail::Reservation hold(budget, info.numel() * (2 * sizeof(double)) + 2 * info.nbytes());
    try {
      const auto a = read_tensor(base, info.name);
      for (std::size_t m = 1; m < models.size(); ++m) {
        const auto b = read_tensor(models[m], info.name);
        if (b.info.dtype != info.dtype) {
          throw ValidationError(fmt::format("dtype mismatch for '{}' in model {}", info.name, m + 1));
        }
        rec.per_model.push_back(kernels::normalized_frobenius_diff(a.values, b.values));
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(fmt::format("while diffing tensor '{}': {}", info.name, e.what()));
    }
    rec.max_diff = 0.0;
    for (double d : rec.per_model) {
      if (std::isnan(d)) {
        rec.max_diff = d;
        break;
      }
      rec.max_diff = std::max(rec.max_diff, d);
    }
  });
  return out;
}

void reclassify(std::span<DiffRecord> records, const NamingScheme& scheme) {
  for (auto& r : records) r.category = classify(r.name, scheme);
}

std::vector<InputFingerprint> fingerprints(std::span<const CheckpointIndex> models) {
  std::vector<InputFingerprint> out;
  for (const auto& m : models) out.push_back({m.root.string(), m.fingerprint()});
  return out;
}

namespace {

bool same_location(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::error_code ea, eb;
  const auto ca = std::filesystem::weakly_canonical(a, ea);
  const auto cb = std::filesystem::weakly_canonical(b, eb);
  return (ea || eb) ? a == b : ca == cb;
}

}  // namespace

bool cache_matches(const DiffCache& cache, std::span<const CheckpointIndex> models) {
  if (cache.inputs.size() != models.size()) return false;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (cache.inputs[i].header_sha256 != models[i].fingerprint()) return false;
    // Identical headers do not imply identical data: the paths must agree too.
    if (!same_location(cache.inputs[i].path, models[i].root)) return false;
  }
  if (cache.records.size() != models.front().tensors.size()) return false;
  for (const auto& r : cache.records) {
    if (models.front().find(r.name) == nullptr) return false;
  }
  return true;
}

std::string_view to_string(Action a) noexcept { return a == Action::Merge ? "merge" : "copy"; }

std::string_view to_string(CopyReason r) noexcept {
  switch (r) {
    case CopyReason::None: return "none";
    case CopyReason::NotInSubset: return "not_in_subset";
    case CopyReason::BelowThreshold: return "below_threshold";
  }
  return "none";
}

MergePlan plan_merge(const MergeConfig& config, std::span<const CheckpointIndex> models,
                     std::span<const DiffRecord> diffs) {
  config.validate();
  if (models.size() != config.models.size()) {
    throw ValidationError(fmt::format("plan: config names {} models, {} opened", config.models.size(), models.size()));
  }
  require_compatible(models);
  const auto& base = models.front();

  std::unordered_map<std::string_view, const DiffRecord*> by_name;
  for (const auto& d : diffs) {
    if (!by_name.emplace(d.name, &d).second) throw ValidationError(fmt::format("plan: duplicate diff record '{}'", d.name));
    if (d.per_model.size() != models.size() - 1) {
      throw ValidationError(fmt::format("plan: diff record '{}' has {} entries for {} models", d.name, d.per_model.size(),
                                        models.size()));
    }
  }
  for (const auto& [name, _] : config.lambda_overrides) {
    if (base.find(name) == nullptr) throw ValidationError(fmt::format("lambda_overrides: unknown tensor '{}'", name));
  }

  MergePlan plan;
  plan.config = config;
  plan.inputs = fingerprints(models);
  plan.decisions.reserve(base.tensors.size());
  for (const auto& t : base.tensors) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw ValidationError(fmt::format("plan: no diff record for tensor '{}'", t.name));
    const DiffRecord& d = *it->second;
    MergeDecision dec;
    dec.name = t.name;
    dec.category = classify(t.name, config.scheme);
    dec.max_diff = d.max_diff;
    if (!in_subset(t.name, dec.category, config.subset)) {
      dec.reason = CopyReason::NotInSubset;
    } else if (!(d.max_diff > config.delta)) {
      dec.reason = CopyReason::BelowThreshold;
    } else {
      dec.action = Action::Merge;
      auto ov = config.lambda_overrides.find(t.name);
      dec.lambdas = ov != config.lambda_overrides.end() ? ov->second : config.lambdas;
      dec.base_preserving = one_hot_base(dec.lambdas);
    }
    plan.decisions.push_back(std::move(dec));
  }
  return plan;
}

std::vector<SweepRow> threshold_sweep(std::span<const DiffRecord> diffs, const MergeConfig& config,
                                      std::span<const double> deltas) {
  if (deltas.empty()) throw ValidationError("sweep: no delta values");
  std::vector<const DiffRecord*> eligible;
  for (const auto& d : diffs) {
    if (in_subset(d.name, d.category, config.subset)) eligible.push_back(&d);
  }
  std::vector<SweepRow> rows;
  for (double delta : deltas) {
    if (std::isnan(delta) || delta < 0.0) throw ValidationError(fmt::format("sweep: delta must be >= 0, got {}", delta));
    SweepRow row;
    row.delta = delta;
    for (auto g : kAllGroups) row.merged[g] = 0;
    for (const auto* d : eligible) {
      if (d->max_diff > delta) {
        ++row.merged[d->category.group];
        ++row.total;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::string out = "delta";
  for (auto g : kAllGroups) out += fmt::format(",{}", to_string(g));
  out += ",total\n";
  for (const auto& r : rows) {
    out += fmt::format("{}", r.delta);
    for (auto g : kAllGroups) out += fmt::format(",{}", r.merged.at(g));
    out += fmt::format(",{}\n", r.total);
  }
  return out;
}

}  // namespace aoe
