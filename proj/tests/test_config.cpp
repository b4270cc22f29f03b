#include "doctest.h"
#include "dpt/config.hpp"
#include "dpt/error.hpp"

using namespace dpt;

TEST_CASE("run config defaults") {
    const RunConfig c;
    CHECK(c.pretrain.steps == 20000);
    CHECK(c.pretrain.batch == 64);
    CHECK(c.tune.steps == 1000);
    CHECK(c.tune.batch == 16);
    CHECK(c.tune.base_lr == 0.001);
    CHECK(c.decode.steps == 8);
    CHECK(c.decode.temperature == 1.0);
    CHECK(c.decode.drop_prompt);
    CHECK(c.protocol.bottleneck == 4);
    CHECK(c.protocol.prompt_tokens == 1);
    CHECK(c.protocol.lambda_grid == std::vector<double>{0, 0.5, 1, 2, 3, 5});
    CHECK(c.protocol.bottleneck_grid == std::vector<int>{1, 2, 4, 8, 16, 32});
    CHECK(c.zsda.synth_ratio == 0.75);
    const auto m = c.resolved_model();
    CHECK(m.token_count == 16);
    CHECK(m.vocab == 16);
}

TEST_CASE("run config round trip") {
    RunConfig c;
    c.apply_seed(17);
    c.world.noise_rate = 0.05;
    c.world.domains.push_back({1, 2, Texture::kChecker});
    c.world.diverse_source = false;
    c.model.layers = 3;
    c.decode.guidance = 0.5;
    c.decode.schedule = {4, 4, 4, 4};
    c.decode.steps = 4;
    c.protocol.mode = PromptMode::kEnsemble;
    c.protocol.control = AttentionControl::kOff;
    c.protocol.seen_classes = {1, 4};
    c.protocol.lambda_grid = {0.25, 7};
    const RunConfig back = parse_run_config(to_ini(c));
    CHECK(to_ini(back) == to_ini(c));
    CHECK(back.seed == 17);
    CHECK(back.decode.seed == c.decode.seed);
    CHECK(back.world.domains.size() == 4);
    CHECK(back.protocol.mode == PromptMode::kEnsemble);
    CHECK(back.protocol.control == AttentionControl::kOff);
    for (Stage s : {Stage::kSourceData, Stage::kTargetData, Stage::kPretrain, Stage::kTune, Stage::kSynth}) {
        CHECK(stage_hash(back, s) == stage_hash(c, s));
    }
}

TEST_CASE("partial configs keep defaults") {
    const RunConfig c = parse_run_config("[run]\nseed = 3\n[decode]\nguidance = 1.5\n# comment\n");
    CHECK(c.seed == 3);
    CHECK(c.decode.guidance == 1.5);
    CHECK(c.pretrain.steps == 20000);
    CHECK(c.decode.seed == derive_seed(3, "decode"));
}

TEST_CASE("run config rejects bad input") {
    CHECK_THROWS_AS(parse_run_config("[nonsense]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[decode]\nguidanse = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[decode]\nguidance = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[decode]\nguidance = two\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[decode]\nschedule = 8, 8\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[protocol]\nmode = both\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[protocol]\ntarget_domain = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[protocol]\ntarget_domain = 9\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[model]\nembed_dim = 30\nheads = 4\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[domains]\n0 = 1, 1, solid\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[domains]\n0 = 0, 1, plaid\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[domains]\n0 = 0 1 solid\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[zsda]\nsynth_ratio = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[run\nseed = 1\n"), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), MissingArtifact);
    try {
        parse_run_config("[tune]\nsteps = 10\nbogus = 1\n", "cfg.ini");
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("tune.bogus") != std::string::npos);
        CHECK(std::string(e.what()).find("cfg.ini") != std::string::npos);
    }
}

TEST_CASE("stage hashes track their inputs") {
    const RunConfig base;
    auto changed = [&](auto edit) {
        RunConfig c = base;
        edit(c);
        std::vector<bool> out;
        for (Stage s : {Stage::kSourceData, Stage::kTargetData, Stage::kPretrain, Stage::kTune, Stage::kSynth}) {
            out.push_back(stage_hash(c, s) != stage_hash(base, s));
        }
        return out;
    };
    using V = std::vector<bool>;
    CHECK(changed([](RunConfig& c) { c.apply_seed(5); }) == V{true, true, true, true, true});
    CHECK(changed([](RunConfig& c) { c.world.noise_rate = 0.1; }) == V{true, true, true, true, true});
    CHECK(changed([](RunConfig& c) { c.protocol.target_domain = 2; }) == V{false, true, false, true, true});
    CHECK(changed([](RunConfig& c) { c.model.layers = 2; }) == V{false, false, true, true, true});
    CHECK(changed([](RunConfig& c) { c.pretrain.steps = 10; }) == V{false, false, true, true, true});
    CHECK(changed([](RunConfig& c) { c.protocol.bottleneck = 8; }) == V{false, false, false, true, true});
    CHECK(changed([](RunConfig& c) { c.decode.guidance = 3; }) == V{false, false, false, false, true});
    CHECK(changed([](RunConfig& c) { c.protocol.lambda_grid = {1}; }) == V{false, false, false, false, false});
    CHECK(stage_hash(base, Stage::kTune).size() == 16);
}

TEST_CASE("fnv-1a reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}
