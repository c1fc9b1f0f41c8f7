#include "aoe/fixtures.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "aoe/hash.hpp"
#include "aoe/kernels.hpp"
#include "json_convert.hpp"

namespace aoe::fixtures {

using detail::json;
using detail::ordered_json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

class Stream {
 public:
  Stream(std::uint64_t seed, std::string_view name, std::uint64_t salt)
      : rng_(splitmix64(seed + fnv1a64(name) + salt * 0xD1B54A32D192ED03ull)) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; uses two uniforms per draw.
  double normal() {
    const double u1 = (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 rng_;
};

struct Layout {
  std::vector<ManifestEntry> tensors;
  std::vector<std::size_t> shard_of;
};

void add(std::vector<ManifestEntry>& out, const FixtureSpec& spec, std::string name,
         std::vector<std::uint64_t> shape) {
  ManifestEntry e;
  e.category = classify(name, NamingScheme::deepseek_v3());
  auto it = spec.dtypes.find(e.category.group);
  e.dtype = it != spec.dtypes.end() ? it->second : spec.default_dtype;
  e.name = std::move(name);
  e.shape = std::move(shape);
  out.push_back(std::move(e));
}

std::vector<std::string> shard_names(std::uint32_t shards) {
  std::vector<std::string> names;
  if (shards == 1) return {"model.safetensors"};
  for (std::uint32_t s = 0; s < shards; ++s) names.push_back(fmt::format("model-{:05d}-of-{:05d}.safetensors", s + 1, shards));
  return names;
}

OutputLayout make_layout(const FixtureSpec& spec, const std::vector<ManifestEntry>& tensors) {
  OutputLayout layout;
  const auto names = shard_names(spec.shards);
  for (const auto& n : names) layout.shards.push_back({n, {}});
  if (spec.shards > 1) layout.index_file = "model.safetensors.index.json";
  const std::size_t n = tensors.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = i * spec.shards / n;
    layout.shards[s].tensors.push_back({tensors[i].name, tensors[i].dtype, tensors[i].shape});
  }
  return layout;
}

std::vector<double> base_values(const FixtureSpec& spec, const ManifestEntry& e) {
  std::uint64_t n = 1;
  for (auto d : e.shape) n *= d;
  Stream s(spec.seed, e.name, 0);
  std::vector<double> v(n);
  for (auto& x : v) x = spec.init_scale * (2.0 * s.uniform() - 1.0);
  // Snap to the storage dtype so "base" means the stored values.
  return kernels::decode(kernels::encode(v, e.dtype), e.dtype);
}

bool selects(const Perturbation& p, const ManifestEntry& e) {
  if (p.group && *p.group != e.category.group) return false;
  if (p.layer && e.category.layer != p.layer) return false;
  if (!p.pattern.empty() && !NamePattern(p.pattern).match(e.name)) return false;
  return true;
}

std::string_view kind_name(Perturbation::Kind k) { return k == Perturbation::Kind::Constant ? "constant" : "gaussian"; }

ordered_json perturbation_to_json(const Perturbation& p) {
  ordered_json j;
  if (p.group) j["group"] = std::string(to_string(*p.group));
  if (p.layer) j["layer"] = *p.layer;
  if (!p.pattern.empty()) j["pattern"] = p.pattern;
  j["kind"] = std::string(kind_name(p.kind));
  j["magnitude"] = p.magnitude;
  return j;
}

// Variants record their perturbations so their headers (and fingerprints)
// differ from the base even though the tensor layout is identical.
Metadata fixture_metadata(const FixtureSpec& spec, std::span<const Perturbation> perturbations, bool variant) {
  Metadata m{{"format", "pt"}, {"aoe.fixture.seed", std::to_string(spec.seed)}};
  if (variant) {
    ordered_json list = ordered_json::array();
    for (const auto& p : perturbations) list.push_back(perturbation_to_json(p));
    m["aoe.fixture.perturbations"] = list.dump();
  }
  return m;
}

Perturbation perturbation_from_json(const json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "group" && key != "layer" && key != "pattern" && key != "kind" && key != "magnitude") {
      throw ValidationError(fmt::format("perturbation: unknown key '{}'", key));
    }
  }
  Perturbation p;
  if (j.contains("group")) p.group = parse_group(j.at("group").get<std::string>());
  if (j.contains("layer")) p.layer = j.at("layer").get<std::uint32_t>();
  if (j.contains("pattern")) p.pattern = j.at("pattern").get<std::string>();
  const auto kind = detail::require(j, "kind", "perturbation").get<std::string>();
  if (kind == "constant") {
    p.kind = Perturbation::Kind::Constant;
  } else if (kind == "gaussian") {
    p.kind = Perturbation::Kind::Gaussian;
  } else {
    throw ValidationError(fmt::format("perturbation: unknown kind '{}'", kind));
  }
  p.magnitude = detail::require(j, "magnitude", "perturbation").get<double>();
  return p;
}

Fixture write_fixture(const FixtureSpec& spec, const std::filesystem::path& dir,
                      std::span<const Perturbation> perturbations, bool variant) {
  spec.validate();
  Fixture fx;
  fx.manifest = fixture_tensors(spec);

  // Resolve selectors up front: each tensor takes at most one perturbation.
  std::vector<int> assigned(fx.manifest.size(), -1);
  for (std::size_t p = 0; p < perturbations.size(); ++p) {
    const auto& pert = perturbations[p];
    if (!pert.group && !pert.layer && pert.pattern.empty()) {
      throw ValidationError(fmt::format("perturbation {}: empty selector", p));
    }
    if (!std::isfinite(pert.magnitude) || (pert.kind == Perturbation::Kind::Gaussian && pert.magnitude < 0)) {
      throw ValidationError(fmt::format("perturbation {}: invalid magnitude {}", p, pert.magnitude));
    }
    bool any = false;
    for (std::size_t t = 0; t < fx.manifest.size(); ++t) {
      if (!selects(pert, fx.manifest[t])) continue;
      any = true;
      if (assigned[t] >= 0) {
        throw ValidationError(fmt::format("perturbations {} and {} both select tensor '{}'", assigned[t], p,
                                          fx.manifest[t].name));
      }
      assigned[t] = static_cast<int>(p);
    }
    if (!any) throw ValidationError(fmt::format("perturbation {} selects no tensor", p));
  }

  CheckpointWriter writer(dir, make_layout(spec, fx.manifest), fixture_metadata(spec, perturbations, variant));
  for (std::size_t t = 0; t < fx.manifest.size(); ++t) {
    auto& e = fx.manifest[t];
    auto values = base_values(spec, e);
    std::vector<std::byte> raw;
    if (assigned[t] < 0) {
      raw = kernels::encode(values, e.dtype);
      if (variant) fx.expected[e.name] = {0.0, "none", 0.0};
    } else {
      const auto& pert = perturbations[static_cast<std::size_t>(assigned[t])];
      Stream noise(spec.seed, e.name, 1 + static_cast<std::uint64_t>(assigned[t]));
      std::vector<double> ideal(values.size());
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double shift = pert.kind == Perturbation::Kind::Constant ? pert.magnitude : pert.magnitude * noise.normal();
        ideal[j] = values[j] + shift;
      }
      raw = kernels::encode(ideal, e.dtype);
      const auto stored = kernels::decode(raw, e.dtype);
      double max_round = 0.0;
      for (std::size_t j = 0; j < stored.size(); ++j) max_round = std::max(max_round, std::fabs(stored[j] - ideal[j]));
      ExpectedDiff x;
      x.kind = std::string(kind_name(pert.kind));
      x.expected = std::fabs(pert.magnitude);
      // Storage rounding moves the RMS by at most max_round; the 1e-12 term
      // covers the summation error of the measurement itself.
      x.bound = max_round + 1e-12 * x.expected;
      if (pert.kind == Perturbation::Kind::Gaussian) x.bound += x.expected * rms_concentration(values.size());
      fx.expected[e.name] = x;
    }
    e.checksum = sha256_hex(raw);
    writer.append(e.name, raw);
  }
  fx.index = writer.finish();
  detail::write_text_file(dir / "manifest.json", manifest_to_json(fx.manifest));
  if (variant) detail::write_text_file(dir / "expected_diffs.json", expected_to_json(fx.expected));
  return fx;
}

}  // namespace

void FixtureSpec::validate() const {
  if (layers == 0) throw ValidationError("fixture: layers must be >= 1");
  if (dense_layers > layers) throw ValidationError("fixture: dense_layers exceeds layers");
  if (hidden == 0 || intermediate == 0 || moe_intermediate == 0 || vocab == 0) {
    throw ValidationError("fixture: all dimensions must be >= 1");
  }
  if (shards == 0) throw ValidationError("fixture: shards must be >= 1");
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) throw ValidationError("fixture: init_scale must be positive");
}

std::vector<ManifestEntry> fixture_tensors(const FixtureSpec& spec) {
  spec.validate();
  const std::uint64_t h = spec.hidden;
  const std::uint64_t qr = spec.q_lora_rank ? spec.q_lora_rank : std::max<std::uint64_t>(1, h / 2);
  const std::uint64_t kvr = spec.kv_lora_rank ? spec.kv_lora_rank : std::max<std::uint64_t>(1, h / 4);
  const std::uint64_t inter = spec.intermediate;
  const std::uint64_t moe = spec.moe_intermediate;
  const std::uint64_t shared = std::uint64_t{spec.shared_experts} * moe;

  std::vector<ManifestEntry> out;
  add(out, spec, "model.embed_tokens.weight", {spec.vocab, h});
  for (std::uint32_t l = 0; l < spec.layers; ++l) {
    const auto p = fmt::format("model.layers.{}.", l);
    add(out, spec, p + "input_layernorm.weight", {h});
    add(out, spec, p + "self_attn.q_a_proj.weight", {qr, h});
    add(out, spec, p + "self_attn.q_a_layernorm.weight", {qr});
    add(out, spec, p + "self_attn.q_b_proj.weight", {h, qr});
    add(out, spec, p + "self_attn.kv_a_proj_with_mqa.weight", {kvr, h});
    add(out, spec, p + "self_attn.kv_a_layernorm.weight", {kvr});
    add(out, spec, p + "self_attn.kv_b_proj.weight", {h, kvr});
    add(out, spec, p + "self_attn.o_proj.weight", {h, h});
    add(out, spec, p + "post_attention_layernorm.weight", {h});
    if (l < spec.dense_layers) {
      add(out, spec, p + "mlp.gate_proj.weight", {inter, h});
      add(out, spec, p + "mlp.up_proj.weight", {inter, h});
      add(out, spec, p + "mlp.down_proj.weight", {h, inter});
      continue;
    }
    if (spec.experts > 0) add(out, spec, p + "mlp.gate.weight", {spec.experts, h});
    for (std::uint32_t e = 0; e < spec.experts; ++e) {
      const auto q = fmt::format("{}mlp.experts.{}.", p, e);
      add(out, spec, q + "gate_proj.weight", {moe, h});
      add(out, spec, q + "up_proj.weight", {moe, h});
      add(out, spec, q + "down_proj.weight", {h, moe});
    }
    if (shared > 0) {
      add(out, spec, p + "mlp.shared_experts.gate_proj.weight", {shared, h});
      add(out, spec, p + "mlp.shared_experts.up_proj.weight", {shared, h});
      add(out, spec, p + "mlp.shared_experts.down_proj.weight", {h, shared});
    }
  }
  add(out, spec, "model.norm.weight", {h});
  add(out, spec, "lm_head.weight", {spec.vocab, h});
  return out;
}

Fixture generate_base(const FixtureSpec& spec, const std::filesystem::path& dir) {
  return write_fixture(spec, dir, {}, false);
}

Fixture generate_variant(const FixtureSpec& spec, std::span<const Perturbation> perturbations,
                         const std::filesystem::path& dir) {
  return write_fixture(spec, dir, perturbations, true);
}

std::string manifest_to_json(std::span<const ManifestEntry> manifest) {
  ordered_json out = ordered_json::array();
  for (const auto& e : manifest) {
    out.push_back({{"name", e.name},
                   {"group", std::string(to_string(e.category.group))},
                   {"layer", e.category.layer ? ordered_json(*e.category.layer) : ordered_json(nullptr)},
                   {"expert", e.category.expert ? ordered_json(*e.category.expert) : ordered_json(nullptr)},
                   {"shape", e.shape},
                   {"dtype", std::string(to_string(e.dtype))},
                   {"checksum", e.checksum}});
  }
  return out.dump(1) + "\n";
}

std::string expected_to_json(const std::map<std::string, ExpectedDiff>& expected) {
  ordered_json out = ordered_json::object();
  for (const auto& [name, x] : expected) {
    out[name] = {{"expected_diff", x.expected}, {"kind", x.kind}, {"bound", x.bound}};
  }
  return out.dump(1) + "\n";
}

std::map<std::string, ExpectedDiff> expected_from_json(std::string_view text) {
  const json j = detail::parse_json_text(text, "expected diffs");
  std::map<std::string, ExpectedDiff> out;
  for (const auto& [name, x] : j.items()) {
    out[name] = {x.at("expected_diff").get<double>(), x.at("kind").get<std::string>(), x.at("bound").get<double>()};
  }
  return out;
}

FixtureSpec spec_from_json(std::string_view text) {
  const json j = detail::parse_json_text(text, "fixture spec");
  if (!j.is_object()) throw ValidationError("fixture spec must be an object");
  FixtureSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "layers") s.layers = v.get<std::uint32_t>();
      else if (key == "dense_layers") s.dense_layers = v.get<std::uint32_t>();
      else if (key == "experts") s.experts = v.get<std::uint32_t>();
      else if (key == "shared_experts") s.shared_experts = v.get<std::uint32_t>();
      else if (key == "hidden") s.hidden = v.get<std::uint32_t>();
      else if (key == "intermediate") s.intermediate = v.get<std::uint32_t>();
      else if (key == "moe_intermediate") s.moe_intermediate = v.get<std::uint32_t>();
      else if (key == "vocab") s.vocab = v.get<std::uint32_t>();
      else if (key == "q_lora_rank") s.q_lora_rank = v.get<std::uint32_t>();
      else if (key == "kv_lora_rank") s.kv_lora_rank = v.get<std::uint32_t>();
      else if (key == "shards") s.shards = v.get<std::uint32_t>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "init_scale") s.init_scale = v.get<double>();
      else if (key == "dtype") s.default_dtype = parse_dtype(v.get<std::string>());
      else if (key == "dtypes") {
        for (const auto& [g, dt] : v.items()) s.dtypes[parse_group(g)] = parse_dtype(dt.get<std::string>());
      } else if (key == "perturbations") {
        for (const auto& p : v) s.perturbations.push_back(perturbation_from_json(p));
      } else {
        throw ValidationError(fmt::format("fixture spec: unknown key '{}'", key));
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("fixture spec: {}", e.what()));
  }
  s.validate();
  return s;
}

FixtureSpec load_spec(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(fmt::format("cannot open '{}'", file.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return spec_from_json(ss.str());
}

std::string spec_to_json(const FixtureSpec& s) {
  ordered_json j;
  j["layers"] = s.layers;
  j["dense_layers"] = s.dense_layers;
  j["experts"] = s.experts;
  j["shared_experts"] = s.shared_experts;
  j["hidden"] = s.hidden;
  j["intermediate"] = s.intermediate;
  j["moe_intermediate"] = s.moe_intermediate;
  j["vocab"] = s.vocab;
  j["q_lora_rank"] = s.q_lora_rank;
  j["kv_lora_rank"] = s.kv_lora_rank;
  j["shards"] = s.shards;
  j["seed"] = s.seed;
  j["init_scale"] = s.init_scale;
  j["dtype"] = std::string(to_string(s.default_dtype));
  ordered_json dts = ordered_json::object();
  for (const auto& [g, dt] : s.dtypes) dts[std::string(to_string(g))] = std::string(to_string(dt));
  j["dtypes"] = std::move(dts);
  ordered_json ps = ordered_json::array();
  for (const auto& p : s.perturbations) ps.push_back(perturbation_to_json(p));
  j["perturbations"] = std::move(ps);
  return j.dump(2) + "\n";
}

CheckpointIndex deepseek_v3_index() {
  FixtureSpec spec;
  spec.layers = 61;
  spec.dense_layers = 3;
  spec.experts = 256;
  spec.shared_experts = 1;
  spec.hidden = 7168;
  spec.intermediate = 18432;
  spec.moe_intermediate = 2048;
  spec.vocab = 129280;
  spec.q_lora_rank = 1536;
  spec.kv_lora_rank = 512;
  spec.default_dtype = DType::BF16;
  spec.shards = 1;

  CheckpointIndex index;
  index.root = "deepseek-v3-synthetic";
  std::uint64_t offset = 0;
  for (const auto& e : fixture_tensors(spec)) {
    TensorInfo t;
    t.name = e.name;
    t.dtype = e.dtype;
    t.shape = e.shape;
    t.begin = offset;
    t.end = offset + t.expected_nbytes();
    offset = t.end;
    index.tensors.push_back(std::move(t));
  }
  index.shards.push_back({"deepseek-v3-synthetic.safetensors", 0, offset, ""});
  index.reindex();
  return index;
}

double rms_concentration(std::uint64_t n, double failure) {
  const double x = std::log(2.0 / failure);
  const double r = std::sqrt(x / static_cast<double>(n));
  const double up = std::sqrt(1.0 + 2.0 * r + 2.0 * x / static_cast<double>(n)) - 1.0;
  const double down = 1.0 - std::sqrt(std::max(0.0, 1.0 - 2.0 * r));
  return std::max(up, down);
}

}  // namespace aoe::fixtures
