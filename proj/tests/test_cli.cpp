#include <sstream>

#include <doctest.h>

#include "aoe/cli.hpp"
#include "aoe/fixtures.hpp"
#include "aoe/recipe.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace aoe;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workspace {
  test::TempDir dir;
  std::string a, b, recipe;

  Workspace() {
    const auto spec = test::tiny_spec();
    fixtures::generate_base(spec, dir / "a");
    fixtures::generate_variant(spec, std::vector{test::shift(Group::RoutedExpertMLP, 0.01)}, dir / "b");
    a = (dir / "a").string();
    b = (dir / "b").string();
    recipe = (dir / "recipe.json").string();
    test::write_text(recipe, R"({"models": ["a", "b"], "lambdas": [0.5, 0.5], "delta": 0.001})");
  }
  std::string at(const std::string& rel) const { return (dir / rel).string(); }
};

}  // namespace

TEST_CASE("cli usage errors exit 2") {
  CHECK(run({}).code == cli::kExitInvalid);
  CHECK(run({"bogus"}).code == cli::kExitInvalid);
  CHECK(run({"diff", "only-one"}).code == cli::kExitInvalid);
  CHECK(run({"--help"}).code == cli::kExitOk);
  CHECK(run({"merge", "--help"}).out.find("--dry-run") != std::string::npos);
}

TEST_CASE("cli diff, report and plan") {
  Workspace w;
  const auto cache = w.at("diffs.json");
  auto r = run({"diff", w.a, w.b, "--out", cache, "--json"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("RoutedExpertMLP") != std::string::npos);

  r = run({"report", "--diff-cache", cache, "--kind", "heatmap", "--aggregate", "max"});
  CHECK(r.code == 0);
  CHECK(r.out.rfind("layer,", 0) == 0);
  r = run({"report", "--diff-cache", cache, "--kind", "histogram", "--edges", "0.005,0.015"});
  CHECK(r.code == 0);
  CHECK(r.out.find("RoutedExpertMLP,0.005,0.015,24") != std::string::npos);
  CHECK(run({"report", "--diff-cache", cache, "--kind", "histogram", "--edges", "0.2,0.1"}).code == 2);
  CHECK(run({"report", "--diff-cache", w.at("missing.json"), "--kind", "heatmap"}).code == 1);

  r = run({"plan", "--recipe", w.recipe, "--diff-cache", cache, "--out", w.at("plan.json")});
  CHECK(r.code == 0);
  CHECK(r.err.find("using diff cache") != std::string::npos);
  CHECK(r.out.find("RoutedExpertMLP") != std::string::npos);

  r = run({"sweep", "--recipe", w.recipe, "--deltas", "0.005,0.02", "--diff-cache", cache});
  CHECK(r.code == 0);
  CHECK(r.out.find("\n0.005,") != std::string::npos);
}

TEST_CASE("cli merge from a plan matches the oracle") {
  Workspace w;
  REQUIRE(run({"plan", "--recipe", w.recipe, "--out", w.at("plan.json")}).code == 0);
  const auto r = run({"merge", "--plan", w.at("plan.json"), "--out", w.at("merged"), "--threads", "2"});
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(w.at("merged/aoe_report.json")));
  const auto expect = oracle::merge({w.a, w.b}, {0.5, 0.5}, 0.001, false);
  const auto got = oracle::load(w.at("merged"));
  REQUIRE(got.size() == expect.size());
  for (const auto& [name, bytes] : expect) CHECK(got.at(name).bytes == bytes);

  // A second merge into the same non-empty directory needs --force.
  CHECK(run({"merge", "--recipe", w.recipe, "--out", w.at("merged")}).code == 1);
  CHECK(run({"merge", "--recipe", w.recipe, "--out", w.at("merged"), "--force"}).code == 0);
  CHECK(run({"merge", "--recipe", w.recipe, "--plan", w.at("plan.json"), "--out", w.at("x")}).code == 2);
}

TEST_CASE("cli merge dry run writes nothing") {
  Workspace w;
  const auto r = run({"merge", "--recipe", w.recipe, "--out", w.at("dry"), "--dry-run"});
  CHECK(r.code == 0);
  CHECK(r.out.find("\"merged\"") != std::string::npos);
  CHECK(!std::filesystem::exists(w.at("dry")));
}

TEST_CASE("cli rejects invalid recipes with exit 2") {
  Workspace w;
  test::write_text(w.at("bad.json"), R"({"models": ["a", "b"], "lambdas": [0.9, 0.9]})");
  CHECK(run({"plan", "--recipe", w.at("bad.json"), "--out", w.at("p.json")}).code == 2);
  CHECK(run({"plan", "--recipe", w.recipe, "--out", w.at("p.json"), "--lambda", "0.6,0.6"}).code == 2);
  CHECK(run({"plan", "--recipe", w.at("nope.json"), "--out", w.at("p.json")}).code == 1);
}

TEST_CASE("cli validate") {
  Workspace w;
  auto r = run({"validate", w.a, "--against", w.b});
  CHECK(r.code == 0);
  CHECK(r.out.rfind("ok: 65 tensors in 2 shard(s)", 0) == 0);

  auto other = test::tiny_spec();
  other.hidden = 8;
  fixtures::generate_base(other, w.dir / "c");
  CHECK(run({"validate", w.a, "--against", w.at("c")}).code == 2);
  CHECK(run({"diff", w.a, w.at("c"), "--out", w.at("d.json")}).code == 2);

  test::write_text(w.dir / "junk.safetensors", "xyz");
  CHECK(run({"validate", w.at("junk.safetensors")}).code == 2);
}

TEST_CASE("cli think-freq and fixture") {
  Workspace w;
  test::write_text(w.dir / "t.jsonl",
                   "{\"id\":1,\"response\":\"<think>a</think>b\"}\n{\"id\":2,\"response\":\"<think>a\"}\nbroken\n");
  auto r = run({"think-freq", w.at("t.jsonl")});
  CHECK(r.code == 0);
  CHECK(r.out.find("\"frequency\": 0.5") != std::string::npos);
  CHECK(r.err.find("1 malformed") != std::string::npos);

  test::write_text(w.dir / "spec.json", R"({"layers": 2, "dense_layers": 1, "hidden": 8, "intermediate": 16,
    "moe_intermediate": 4, "vocab": 16, "experts": 2,
    "perturbations": [{"group": "Attention", "kind": "constant", "magnitude": 0.5}]})");
  CHECK(run({"fixture", "--spec", w.at("spec.json"), "--out", w.at("f0")}).code == 0);
  CHECK(run({"fixture", "--spec", w.at("spec.json"), "--out", w.at("f1"), "--variant"}).code == 0);
  CHECK(std::filesystem::exists(w.at("f1/expected_diffs.json")));
  CHECK(!std::filesystem::exists(w.at("f0/expected_diffs.json")));
  CHECK(run({"validate", w.at("f0"), "--against", w.at("f1")}).code == 0);
}
