#include "doctest.h"

#include <fstream>
#include <limits>
#include <set>

#include "adfq/config.hpp"
#include "adfq/storage.hpp"
#include "generators.hpp"

using namespace adfq;
using nlohmann::json;

TEST_SUITE("config") {

TEST_CASE("defaults") {
  const RunConfig c = RunConfig::defaults(false);
  CHECK(c.policy.alpha_qkv == 5.0);
  CHECK(c.policy.alpha_fc1 == 10.0);
  CHECK(c.policy.epsilon == 1e-8);
  CHECK(c.optim.lambda == 0.01);
  CHECK(c.optim.lr_weights == 3e-3);
  CHECK(c.optim.lr_activations == 4e-5);
  CHECK(c.optim.iterations == 300);
  CHECK(c.calib_samples == 64u);
  CHECK((c.policy.poq && c.policy.slq && c.policy.amo));
  CHECK_NOTHROW(c.validate());

  const RunConfig p = RunConfig::defaults(true);
  CHECK(p.optim.iterations == 3000);
  CHECK(p.calib_samples == 1024u);
  CHECK(p.paper_mode);
  // nothing else moves
  RunConfig q = p;
  q.optim.iterations = c.optim.iterations;
  q.calib_samples = c.calib_samples;
  q.paper_mode = false;
  CHECK(q == c);
}

TEST_CASE("empty document gives defaults") {
  CHECK(run_config_from_json(json::object()) == RunConfig::defaults(false));
  CHECK(run_config_from_json(json::object(), true) == RunConfig::defaults(true));
  CHECK(run_config_from_json(json{{"paper_mode", true}}) == RunConfig::defaults(true));
}

TEST_CASE("explicit keys win over paper mode") {
  const RunConfig c = run_config_from_json(json{{"iterations", 50}, {"calib_samples", 8}}, true);
  CHECK(c.paper_mode);
  CHECK(c.optim.iterations == 50);
  CHECK(c.calib_samples == 8u);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(run_config_from_json(json{{"itterations", 5}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"toggles", {{"poq", true}, {"xyz", false}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"epoch", 1}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"paths", {{"outt", "a"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"model", {{"depth", 2}}}}), ConfigError);
  try {
    run_config_from_json(json{{"toggles", {{"nope", true}}}});
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("toggles.nope") != std::string::npos);
  }
}

TEST_CASE("type and range errors") {
  CHECK_THROWS_AS(run_config_from_json(json{{"bits_w", "4"}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"bits_w", 9}}), PreconditionError);
  CHECK_THROWS_AS(run_config_from_json(json{{"iterations", -1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"lambda", true}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"alpha_qkv", -1.0}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"alpha_sweep", {1, 0}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"site_overrides", {{"query", "outlier_per_patch"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"site_overrides", {{"nowhere", "uniform"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json::array()), ConfigError);
  CHECK(std::isinf(run_config_from_json(json{{"alpha_fc1", nullptr}}).policy.alpha_fc1));
}

TEST_CASE("config round trip is a fixed point") {
  gen::for_all(200, 701, [](Rng& r, int) {
    RunConfig c = RunConfig::defaults(r.uniform() < 0.3);
    c.bits_w = 2 + static_cast<int>(r.uniform_int(7));
    c.bits_a = 2 + static_cast<int>(r.uniform_int(7));
    c.policy.alpha_qkv = r.uniform() < 0.2 ? std::numeric_limits<double>::infinity() : r.uniform(0.5, 30.0);
    c.policy.alpha_fc1 = r.uniform(0.5, 30.0);
    c.policy.poq = r.uniform() < 0.5;
    c.policy.slq = r.uniform() < 0.5;
    c.policy.amo = r.uniform() < 0.5;
    c.policy.rule = r.uniform() < 0.5 ? OutlierRule::Magnitude : OutlierRule::OneSided;
    if (r.uniform() < 0.5) c.policy.overrides[SiteKind::Value] = QuantizerKind::Log2;
    c.optim.lambda = r.uniform(0.0, 1.0);
    c.optim.lr_weights = r.uniform(1e-5, 1e-1);
    c.optim.iterations = 1 + static_cast<int>(r.uniform_int(5000));
    c.optim.batch = 1 + static_cast<int>(r.uniform_int(32));
    c.train.epochs = static_cast<int>(r.uniform_int(10));
    c.train_samples = 1 + static_cast<std::size_t>(r.uniform_int(5000));
    c.eval_samples = 1 + static_cast<std::size_t>(r.uniform_int(5000));
    c.alpha_sweep = {r.uniform(1, 3), r.uniform(3, 9)};
    c.seed = static_cast<std::uint64_t>(r.uniform_int(1 << 30));
    c.paths.out = "x/y.json";
    const json j = config_to_json(c);
    const RunConfig back = run_config_from_json(j);
    REQUIRE(back == c);
    REQUIRE(config_to_json(back) == j);
    REQUIRE(run_config_from_json(json::parse(j.dump())) == c);
  });
}

TEST_CASE("config files") {
  const fs::path dir = fs::temp_directory_path() / "adfq_unit_config";
  fs::create_directories(dir);
  std::ofstream(dir / "ok.json") << R"({"bits_w": 6, "seed": 9})";
  const RunConfig c = load_run_config(dir / "ok.json");
  CHECK(c.bits_w == 6);
  CHECK(c.seed == 9u);
  CHECK(load_run_config(dir / "ok.json", true).optim.iterations == 3000);
  std::ofstream(dir / "bad.json") << "{ bits_w: 6";
  CHECK_THROWS_AS(load_run_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), IoError);
}

TEST_CASE("sub-seeds are distinct and stable") {
  RunConfig c;
  c.seed = 42;
  const std::set<std::uint64_t> s = {c.model_seed(), c.train_data_seed(), c.calib_seed(), c.eval_seed()};
  CHECK(s.size() == 4u);
  RunConfig d;
  d.seed = 42;
  CHECK(d.eval_seed() == c.eval_seed());
  d.seed = 43;
  CHECK(d.eval_seed() != c.eval_seed());
}

}  // TEST_SUITE
