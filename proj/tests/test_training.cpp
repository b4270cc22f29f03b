#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "dpt/error.hpp"
#include "dpt/training.hpp"

using namespace dpt;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.layers = 1;
    c.embed_dim = 16;
    c.heads = 2;
    c.ffn_dim = 32;
    return c;
}

// Class 0 is mirror-symmetric; mirroring class 1 lands on a tie that the
// oracle resolves to class 0.
WorldSpec two_class_world() {
    WorldParams p;
    p.class_count = 2;
    const Bitmap sym{1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1};
    const Bitmap lopsided{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    return WorldSpec(p, {sym, lopsided});
}

std::vector<std::uint8_t> snapshot(const std::vector<NamedTensor>& params) {
    std::vector<std::uint8_t> bytes;
    for (const auto& p : params) {
        const auto* raw = reinterpret_cast<const std::uint8_t*>(p.tensor.data().data());
        bytes.insert(bytes.end(), raw, raw + p.tensor.numel() * sizeof(double));
    }
    return bytes;
}

}  // namespace

TEST_CASE("mask count endpoints") {
    CHECK(mask_count(1e-12, 16) == 16);
    CHECK(mask_count(1.0, 16) == 1);
    CHECK(mask_count(0.5, 16) == static_cast<int>(std::ceil(std::cos(std::numbers::pi / 4) * 16)));
    for (double u = 0.001; u <= 1.0; u += 0.001) {
        const int k = mask_count(u, 16);
        CHECK(k >= 1);
        CHECK(k <= 16);
    }
}

TEST_CASE("sampled masks match the cosine ratio") {
    Rng rng(1);
    SUBCASE("fine grid approaches 2/pi") {
        const int n = 1024;
        double ratio = 0;
        for (int i = 0; i < 10000; ++i) {
            const auto m = sample_mask(rng, n);
            ratio += static_cast<double>(std::count(m.begin(), m.end(), 1)) / n;
        }
        CHECK(std::abs(ratio / 10000 - 2.0 / std::numbers::pi) < 0.01);
    }
    SUBCASE("16 tokens match the discretized expectation") {
        // Midpoint-rule expectation of ceil(cos(pi u / 2) 16) / 16.
        double expected = 0;
        const int grid = 1000000;
        for (int i = 0; i < grid; ++i) expected += mask_count((i + 0.5) / grid, 16) / 16.0;
        expected /= grid;
        double ratio = 0;
        for (int i = 0; i < 10000; ++i) {
            const auto m = sample_mask(rng, 16);
            const auto k = std::count(m.begin(), m.end(), 1);
            CHECK(k >= 1);
            ratio += static_cast<double>(k) / 16;
        }
        CHECK(std::abs(ratio / 10000 - expected) < 0.01);
    }
}

TEST_CASE("flip augmentation") {
    const WorldSpec world = two_class_world();
    CHECK(world.flip_preserves_class(0));
    CHECK_FALSE(world.flip_preserves_class(1));
    Rng rng(2);
    const LabeledSequence sym = world.generate(0, 0, rng, 0.0);

    SUBCASE("symmetric class keeps its label and flipping twice is the identity") {
        const auto once = flip_horizontal<int>(sym.tokens, 4, 4);
        CHECK(world.oracle_classify(once).class_id == 0);
        CHECK(flip_horizontal<int>(once, 4, 4) == sym.tokens);
    }
    SUBCASE("flip frequency is one half") {
        // A sequence with distinct columns, so a flip is observable.
        LabeledSequence marked = sym;
        for (int r = 0; r < 4; ++r) marked.tokens[static_cast<std::size_t>(r * 4)] = world.encode(1, 2);
        const int n = 10000;
        int flips = 0;
        for (int i = 0; i < n; ++i) flips += augment(marked, world, rng).tokens != marked.tokens;
        CHECK(std::abs(flips - n * 0.5) <= 3 * std::sqrt(n * 0.25));
    }
    SUBCASE("class-changing flips are disabled") {
        const LabeledSequence lop = world.generate(1, 0, rng, 0.0);
        for (int i = 0; i < 100; ++i) CHECK(augment(lop, world, rng).tokens == lop.tokens);
    }
}

TEST_CASE("pretraining") {
    const WorldSpec world(WorldParams{});
    Rng data_rng(3);
    std::vector<LabeledSequence> data;
    for (int i = 0; i < 50; ++i) data.push_back(world.generate(i % 10, 0, data_rng));

    SUBCASE("starts at ln K") {
        Rng init(4);
        SourceModel src(ModelConfig{}, 10, init);
        const auto log = pretrain(src, data, TrainConfig{1, 64, 0.001, 1});
        CHECK(std::abs(log.records.front().loss - std::log(16.0)) < 0.01 * std::log(16.0));
    }
    SUBCASE("identical seeds replay bit-identically") {
        std::vector<std::vector<std::uint8_t>> runs;
        for (int r = 0; r < 2; ++r) {
            Rng init(5);
            SourceModel src(small_model(), 10, init);
            pretrain(src, data, TrainConfig{20, 8, 0.001, 9});
            runs.push_back(snapshot(src.parameters()));
        }
        CHECK(runs[0] == runs[1]);
    }
    SUBCASE("a single sequence is memorized") {
        Rng init(6);
        SourceModel src(small_model(), 10, init);
        const std::vector<LabeledSequence> one{data.front()};
        const auto log = pretrain(src, one, TrainConfig{400, 8, 0.01, 2});
        CHECK(log.tail_mean(50) < 0.05);
        CHECK(log.tail_mean(50) < log.head_mean(50));
    }
    SUBCASE("non-finite loss aborts with the step") {
        Rng init(7);
        SourceModel src(small_model(), 10, init);
        src.class_table.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
        std::vector<LabeledSequence> zeros(4, data.front());
        for (auto& z : zeros) z.class_id = 0;
        try {
            pretrain(src, zeros, TrainConfig{3, 2, 0.001, 1});
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("step 0") != std::string::npos);
        }
    }
    CHECK_THROWS_AS(pretrain(*std::make_unique<SourceModel>(small_model(), 10, data_rng), {}, TrainConfig{}),
                    InvalidArgument);
}

TEST_CASE("tuning") {
    const WorldSpec world(WorldParams{});
    Rng rng(8);
    SourceModel src(small_model(), 10, rng);
    // A few source steps so logits, and with them prompt gradients, are non-zero.
    std::vector<LabeledSequence> source_set;
    for (int i = 0; i < 20; ++i) source_set.push_back(world.generate(i % 10, 0, rng));
    pretrain(src, source_set, TrainConfig{20, 8, 0.01, 1});
    std::vector<LabeledSequence> tune_set{world.generate(0, 1, rng), world.generate(1, 1, rng)};
    const std::vector<int> targets{0, 1};

    SUBCASE("only prompt parameters change") {
        const auto before = snapshot(src.parameters());
        PromptBundle b{AffinityMatrix(2, 10), BottleneckPrompt(1, 4, 16, 1, true, rng)};
        const auto prompt_before = snapshot(b.parameters());
        const auto log = tune(src, b, world, tune_set, targets, TrainConfig{30, 4, 0.01, 3});
        CHECK(log.records.size() == 30);
        CHECK(snapshot(src.parameters()) == before);
        CHECK(snapshot(b.parameters()) != prompt_before);
        for (const auto& p : src.parameters()) CHECK(p.tensor.requires_grad());
    }
    SUBCASE("tuning replays bit-identically") {
        std::vector<std::vector<std::uint8_t>> runs;
        for (int r = 0; r < 2; ++r) {
            Rng init(9);
            PromptBundle b{AffinityMatrix(2, 10), BottleneckPrompt(1, 4, 16, 1, true, init)};
            tune(src, b, world, tune_set, targets, TrainConfig{10, 4, 0.01, 4});
            runs.push_back(snapshot(b.parameters()));
        }
        CHECK(runs[0] == runs[1]);
    }
    SUBCASE("bad inputs") {
        PromptBundle b{AffinityMatrix(2, 10), BottleneckPrompt(1, 4, 16, 1, true, rng)};
        CHECK_THROWS_AS(tune(src, b, world, {}, {}, TrainConfig{}), InvalidArgument);
        const std::vector<int> wrong{0, 5};
        CHECK_THROWS_AS(tune(src, b, world, tune_set, wrong, TrainConfig{}), InvalidArgument);
    }
}

TEST_CASE("loss logs are written as TSV") {
    LossLog log;
    log.records = {{0, 2.5, 0.001}, {1, 2.0, 0.0005}};
    CHECK(log.head_mean(1) == 2.5);
    CHECK(log.tail_mean(5) == 2.25);
    const auto path = std::filesystem::temp_directory_path() / "dpt_loss_test.tsv";
    log.write_tsv(path);
    std::ifstream in(path);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "step\tloss\tlr");
    CHECK(first.rfind("0\t2.5\t", 0) == 0);
    std::filesystem::remove(path);
}
