#include <cstdlib>

#include <doctest.h>

#include "aoe/error.hpp"
#include "aoe/recipe.hpp"
#include "support.hpp"

using namespace aoe;

TEST_CASE("recipe parsing") {
  const auto c = recipe_from_json(R"({
    "models": ["base", "/abs/other"],
    "lambdas": [0.25, 0.75],
    "delta": 0.0025,
    "subset": "experts-only",
    "output": {"policy": "sequential", "max_shard_bytes": 4096}
  })", "/recipes/dir");
  CHECK(c.models[0] == std::filesystem::path("/recipes/dir/base"));
  CHECK(c.models[1] == std::filesystem::path("/abs/other"));
  CHECK(c.lambdas == std::vector<double>{0.25, 0.75});
  CHECK(c.delta == 0.0025);
  CHECK(c.subset.mode == SubsetSpec::Mode::ExpertOnly);
  CHECK(c.output.mode == OutputPolicy::Mode::Sequential);
  CHECK(c.output.max_shard_bytes == 4096u);
  CHECK(c.convex_required);

  const auto again = recipe_from_json(recipe_to_json(c));
  CHECK(recipe_to_json(again) == recipe_to_json(c));
}

TEST_CASE("recipe files resolve relative models against their directory") {
  test::TempDir dir;
  std::filesystem::create_directories(dir / "r");
  test::write_text(dir / "r" / "recipe.json", R"({"models": ["../a", "b"], "lambdas": [0.5, 0.5]})");
  const auto c = load_recipe(dir / "r" / "recipe.json");
  CHECK(c.models[0] == (dir / "a").lexically_normal());
  CHECK(c.models[1] == (dir / "r" / "b").lexically_normal());
}

TEST_CASE("recipe rejects bad input naming the field") {
  auto msg = [](const char* text) {
    try {
      recipe_from_json(text);
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.5,0.5], "detla": 0})").find("detla") != std::string::npos);
  CHECK(msg(R"({"models": ["a","b"]})").find("lambdas") != std::string::npos);
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.5]})") != "no error");
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.7,0.7]})") != "no error");
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.5,0.5], "delta": -1})").find("delta") != std::string::npos);
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.5,0.5], "subset": "some"})").find("subset") != std::string::npos);
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [0.5,0.5], "output": {"policy": "x"}})").find("policy") !=
        std::string::npos);
  CHECK(msg("[1,") != "no error");
  CHECK(msg(R"({"models": ["a","b"], "lambdas": [1.5,-0.5], "convex_required": false})") == "no error");
}

TEST_CASE("custom subsets and schemes in recipes") {
  const auto c = recipe_from_json(R"({
    "models": ["a", "b"], "lambdas": [0.5, 0.5],
    "subset": {"groups": ["Attention"], "patterns": [{"pattern": "model.layers.0.*", "include": false}]},
    "scheme": [{"pattern": "blk.{layer}.ffn_{proj}_exps.{expert}", "group": "RoutedExpertMLP", "captures": ["layer", "expert", "proj"]}]
  })");
  CHECK(c.subset.mode == SubsetSpec::Mode::Custom);
  CHECK(c.subset.groups.count(Group::Attention) == 1);
  REQUIRE(c.scheme.rules.size() == 1);
  CHECK(classify("blk.3.ffn_up_exps.7", c.scheme).group == Group::RoutedExpertMLP);
  CHECK_THROWS_AS(
      scheme_from_json(R"([{"pattern": "blk.{layer}.x", "group": "Attention", "captures": ["expert"]}])"),
      ValidationError);
  CHECK_THROWS_AS(scheme_from_json(R"([{"pattern": "x", "group": "Nope"}])"), ValidationError);
}

TEST_CASE("scheme from the environment") {
  test::TempDir dir;
  test::write_text(dir / "scheme.json", R"([{"pattern": "*", "group": "Other"}])");
  ::setenv(kSchemeEnv, (dir / "scheme.json").c_str(), 1);
  const auto s = default_scheme();
  ::unsetenv(kSchemeEnv);
  CHECK(s.rules.size() == 1);
  CHECK(classify("model.layers.0.mlp.experts.0.up_proj.weight", s).group == Group::Other);
  CHECK(default_scheme().rules.size() == NamingScheme::deepseek_v3().rules.size());
}
