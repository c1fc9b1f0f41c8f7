#include <numeric>

#include <doctest.h>

#include "aoe/error.hpp"
#include "aoe/fixtures.hpp"
#include "aoe/taxonomy.hpp"
#include "support.hpp"

using namespace aoe;

namespace {

std::uint64_t count_group(const std::vector<CensusEntry>& c, Group g) {
  std::uint64_t n = 0;
  for (const auto& e : c) n += e.group == g ? e.tensors : 0;
  return n;
}

}  // namespace

TEST_CASE("default scheme classifies DeepSeek-V3 names") {
  const auto s = NamingScheme::deepseek_v3();
  CHECK(classify("model.layers.7.mlp.experts.42.down_proj.weight", s) ==
        TensorCategory{Group::RoutedExpertMLP, 7, 42, "down"});
  const auto attn = classify("model.layers.0.self_attn.q_a_proj.weight", s);
  CHECK(attn.group == Group::Attention);
  CHECK(attn.layer == 0u);
  CHECK(!attn.expert);
  CHECK(classify("model.layers.9.mlp.gate.weight", s) == TensorCategory{Group::ExpertGate, 9, std::nullopt, ""});
  CHECK(classify("model.layers.9.mlp.shared_experts.gate_proj.weight", s) ==
        TensorCategory{Group::SharedExpertMLP, 9, std::nullopt, "gate"});
  CHECK(classify("model.layers.1.mlp.up_proj.weight", s) == TensorCategory{Group::DenseMLP, 1, std::nullopt, "up"});
  CHECK(classify("model.layers.3.input_layernorm.weight", s).group == Group::EmbeddingNormHead);
  CHECK(classify("model.layers.3.self_attn.kv_a_layernorm.weight", s).group == Group::EmbeddingNormHead);
  CHECK(!classify("model.layers.3.self_attn.kv_a_layernorm.weight", s).layer);
  CHECK(classify("model.embed_tokens.weight", s).group == Group::EmbeddingNormHead);
  CHECK(classify("lm_head.weight", s).group == Group::EmbeddingNormHead);
  CHECK(classify("model.norm.weight", s).group == Group::EmbeddingNormHead);
  CHECK(classify("model.layers.61.embed_tokens.weight", s).group == Group::Other);
  CHECK(classify("something.else", s) == TensorCategory{});
  // The expert bias used for routing belongs to the router gate.
  CHECK(classify("model.layers.5.mlp.gate.e_score_correction_bias", s).group == Group::ExpertGate);
}

TEST_CASE("empty scheme classifies everything as Other") {
  const NamingScheme empty;
  CHECK(classify("model.layers.7.mlp.experts.42.down_proj.weight", empty).group == Group::Other);
}

TEST_CASE("first matching rule wins") {
  NamingScheme s;
  s.rules.emplace_back("a.*", Group::EmbeddingNormHead);
  s.rules.emplace_back("a.b", Group::Other);
  CHECK(classify("a.b", s).group == Group::EmbeddingNormHead);
}

TEST_CASE("pattern matching") {
  NamePattern::Captures c;
  CHECK(NamePattern("x.{layer}.y").match("x.12.y", &c));
  CHECK(c.layer == 12u);
  CHECK(!NamePattern("x.{layer}.y").match("x..y"));
  CHECK(!NamePattern("x.{layer}.y").match("x.1a.y"));
  CHECK(NamePattern("*.w").match(".w"));
  CHECK(NamePattern("a*b*c").match("a..b..b..c"));
  CHECK(!NamePattern("a*b*c").match("a..b..b..d"));
  CHECK(!NamePattern("abc").match("abcd"));
  NamePattern::Captures p;
  CHECK(NamePattern("{proj}_proj.weight").match("kv_a_proj_proj.weight", &p));
  CHECK(p.proj == "kv_a_proj");
  CHECK(NamePattern("e.{expert}").match("e.255", &p));
  CHECK(p.expert == 255u);
}

TEST_CASE("naming rules must capture what their group needs") {
  CHECK_THROWS_AS(NamingRule("model.layers.{layer}.mlp.experts.*", Group::RoutedExpertMLP), ValidationError);
  CHECK_THROWS_AS(NamingRule("model.*.self_attn.*", Group::Attention), ValidationError);
  CHECK_NOTHROW(NamingRule("lm_head.*", Group::EmbeddingNormHead));
}

TEST_CASE("subset membership") {
  const auto s = NamingScheme::deepseek_v3();
  const auto routed = classify("model.layers.4.mlp.experts.0.up_proj.weight", s);
  const auto gate = classify("model.layers.4.mlp.gate.weight", s);
  const auto shared = classify("model.layers.4.mlp.shared_experts.up_proj.weight", s);
  CHECK(in_subset(routed, SubsetSpec::expert_only()));
  CHECK(!in_subset(gate, SubsetSpec::expert_only()));
  CHECK(!in_subset(shared, SubsetSpec::expert_only()));
  for (Group g : kAllGroups) {
    TensorCategory c;
    c.group = g;
    CHECK(in_subset(c, SubsetSpec::full()));
    CHECK(in_subset(c, SubsetSpec::expert_only()) == (g == Group::RoutedExpertMLP));
  }

  SubsetSpec custom{SubsetSpec::Mode::Custom, {Group::Attention, Group::SharedExpertMLP}, {}};
  custom.patterns.push_back({"model.layers.0.*", false});
  custom.patterns.push_back({"model.layers.*.mlp.gate.weight", true});
  const std::string a0 = "model.layers.0.self_attn.o_proj.weight";
  const std::string a1 = "model.layers.1.self_attn.o_proj.weight";
  CHECK(!in_subset(a0, classify(a0, s), custom));
  CHECK(in_subset(a1, classify(a1, s), custom));
  CHECK(in_subset("model.layers.4.mlp.gate.weight", gate, custom));
  // Unmatched names default to excluded under custom subsets.
  CHECK(!in_subset("mystery", classify("mystery", s), custom));
  CHECK(describe(SubsetSpec::full()) == "full");
  CHECK(describe(SubsetSpec::expert_only()) == "experts-only");
}

TEST_CASE("fixture census: 3 expert layers x 4 experts x 3 projections") {
  auto spec = fixtures::FixtureSpec{};
  spec.layers = 5;
  spec.dense_layers = 2;
  spec.experts = 4;
  test::TempDir dir;
  fixtures::generate_base(spec, dir.path());
  const auto index = open_checkpoint(dir.path());
  const auto c = census(index, NamingScheme::deepseek_v3());
  CHECK(count_group(c, Group::RoutedExpertMLP) == 36);
  CHECK(count_group(c, Group::ExpertGate) == 3);
  CHECK(count_group(c, Group::DenseMLP) == 6);
  CHECK(count_group(c, Group::SharedExpertMLP) == 9);
  CHECK(count_group(c, Group::Attention) == 25);
  CHECK(count_group(c, Group::Other) == 0);
  std::uint64_t total = 0, params = 0;
  for (const auto& e : c) {
    total += e.tensors;
    params += e.parameters;
  }
  CHECK(total == index.size());
  std::uint64_t expect_params = 0;
  for (const auto& t : index.tensors) expect_params += t.numel();
  CHECK(params == expect_params);
  // Layered entries come first, in ascending layer order.
  CHECK(c.front().layer == 0u);
  CHECK(!c.back().layer);
}

TEST_CASE("DeepSeek-shaped census: 58 x 256 x 3 routed expert tensors") {
  const auto index = fixtures::deepseek_v3_index();
  const auto c = census(index, NamingScheme::deepseek_v3());
  CHECK(count_group(c, Group::RoutedExpertMLP) == 44544);
  CHECK(count_group(c, Group::ExpertGate) == 58);
  CHECK(count_group(c, Group::Other) == 0);
  std::uint64_t total = 0;
  for (const auto& e : c) total += e.tensors;
  CHECK(total == index.size());
  std::size_t selected = 0;
  for (const auto& t : index.tensors) {
    selected += in_subset(t.name, classify(t.name, NamingScheme::deepseek_v3()), SubsetSpec::expert_only()) ? 1 : 0;
  }
  CHECK(selected == 44544);
}
