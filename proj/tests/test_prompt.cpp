#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dpt/error.hpp"
#include "dpt/ops.hpp"
#include "dpt/prompt.hpp"
#include "gradcheck.hpp"

using namespace dpt;
using dpt::testing::random_tensor;

namespace {

double norm(std::span<const double> v) {
    return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

std::span<const double> row(const Tensor& t, std::size_t r) {
    const std::size_t d = t.dim(1);
    return t.data().subspan(r * d, d);
}

}  // namespace

TEST_CASE("affinity rows are distributions") {
    Rng rng(1);
    AffinityMatrix a(random_tensor({5, 10}, rng, 3.0));
    const Tensor r = a.realized();
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0;
        for (double v : row(r, i)) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("class-specific prompt is a convex combination of the table") {
    Rng rng(2);
    const Tensor w = random_tensor({10, 64}, rng, 1.0, false);
    SUBCASE("one-hot row selects the row exactly") {
        Tensor logits = Tensor::full({1, 10}, -1e4);
        logits.mutable_data()[6] = 0.0;
        const Tensor t = class_specific_prompt(0, AffinityMatrix(logits), w);
        for (std::size_t k = 0; k < 64; ++k) CHECK(t.data()[k] == doctest::Approx(row(w, 6)[k]).epsilon(1e-15));
    }
    SUBCASE("uniform row gives the column mean") {
        const Tensor t = class_specific_prompt(2, AffinityMatrix(3, 10), w);
        for (std::size_t k = 0; k < 64; ++k) {
            double m = 0;
            for (std::size_t j = 0; j < 10; ++j) m += row(w, j)[k];
            CHECK(t.data()[k] == doctest::Approx(m / 10).epsilon(1e-12));
        }
    }
    SUBCASE("norm never exceeds the largest row") {
        double largest = 0;
        for (std::size_t j = 0; j < 10; ++j) largest = std::max(largest, norm(row(w, j)));
        for (int trial = 0; trial < 50; ++trial) {
            AffinityMatrix a(random_tensor({1, 10}, rng, 4.0));
            CHECK(norm(class_specific_prompt(0, a, w).data()) <= largest + 1e-12);
        }
    }
    CHECK_THROWS_AS(class_specific_prompt(3, AffinityMatrix(3, 10), w), InvalidArgument);
    CHECK_THROWS_AS(class_specific_prompt(0, AffinityMatrix(3, 9), w), DimensionError);
}

TEST_CASE("unconditional embedding") {
    Rng rng(3);
    const Tensor one = random_tensor({1, 8}, rng, 1.0, false);
    const Tensor t0 = unconditional_embedding(one);
    CHECK(std::equal(t0.data().begin(), t0.data().end(), one.data().begin()));

    std::vector<double> sym{1.5, -2.0, 0.25, -1.5, 2.0, -0.25};
    const Tensor zero = unconditional_embedding(Tensor({2, 3}, sym));
    for (double v : zero.data()) CHECK(v == 0.0);

    const Tensor w = random_tensor({7, 16}, rng, 1.0, false);
    const Tensor tu = unconditional_embedding(w);
    for (std::size_t k = 0; k < 16; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) s += w.data()[j * 16 + k];
        CHECK(tu.data()[k] == doctest::Approx(s / 7).epsilon(1e-13));
    }
    CHECK_THROWS_AS(unconditional_embedding(Tensor::zeros({0, 4})), InvalidArgument);
}

TEST_CASE("assembled prefixes") {
    Rng rng(4);
    const Tensor w = random_tensor({10, 64}, rng, 1.0, false);
    BottleneckPrompt one(1, 4, 64, 4, true, rng);
    const PrefixSlots p = assemble(0, AffinityMatrix(2, 10), w, one, 3);
    CHECK(p.width() == 2);
    CHECK(p.prompt.size() == 4);
    CHECK(p.class_slot.shape() == Shape{3, 64});

    const PrefixSlots z = assemble_source_class(7, w, one, 2);
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t k = 0; k < 64; ++k) CHECK(z.class_slot.data()[b * 64 + k] == row(w, 7)[k]);
    }
    // Stripping the prompt leaves exactly the source conditioning.
    const std::vector<int> ids{7, 7};
    const PrefixSlots src = class_prefix(ids, w);
    CHECK(src.prompt.empty());
    CHECK(std::equal(src.class_slot.data().begin(), src.class_slot.data().end(), z.class_slot.data().begin()));

    BottleneckPrompt narrow(1, 4, 32, 4, true, rng);
    CHECK_THROWS_AS(assemble(0, AffinityMatrix(2, 10), w, narrow, 1), DimensionError);
}

TEST_CASE("bottleneck prompt expands the latent per layer") {
    Rng rng(5);
    BottleneckPrompt p(2, 4, 64, 4, true, rng);
    CHECK(p.deep());
    const auto layers = p.layer_prompts();
    REQUIRE(layers.size() == 4);
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t s = 0; s < 2; ++s) {
            for (std::size_t k = 0; k < 64; ++k) {
                double v = 0;
                for (std::size_t j = 0; j < 4; ++j) v += p.latent.data()[s * 4 + j] * p.expand[l].data()[j * 64 + k];
                CHECK(layers[l].data()[s * 64 + k] == doctest::Approx(v).epsilon(1e-14));
            }
        }
    }
    CHECK_FALSE(BottleneckPrompt(1, 4, 64, 4, false, rng).deep());
    CHECK_THROWS_AS(BottleneckPrompt(0, 4, 64, 4, true, rng), InvalidArgument);
}

TEST_CASE("default prompt stays under ten thousand parameters") {
    Rng rng(6);
    PromptBundle b{AffinityMatrix(10, 10), BottleneckPrompt(1, 4, 64, 4, true, rng)};
    CHECK(b.parameter_count() == 100 + 4 + 4 * 4 * 64);
    CHECK(b.parameter_count() < 10000);
}

TEST_CASE("predicted classes follow the affinity ranking") {
    Rng rng(7);
    Tensor hot = Tensor::full({1, 10}, -5.0);
    hot.mutable_data()[4] = 5.0;
    CHECK(predict_classes(AffinityMatrix(hot), 0, 1) == std::vector<int>{4});
    CHECK(predict_classes(AffinityMatrix(1, 10), 0, 3) == std::vector<int>{0, 1, 2});
    for (int trial = 0; trial < 20; ++trial) {
        AffinityMatrix a(random_tensor({2, 10}, rng, 1.0));
        std::vector<int> ids(10);
        std::iota(ids.begin(), ids.end(), 0);
        const auto r = row(a.logits, 1);
        std::sort(ids.begin(), ids.end(), [&](int x, int y) { return r[x] > r[y] || (r[x] == r[y] && x < y); });
        ids.resize(5);
        CHECK(predict_classes(a, 1, 5) == ids);
    }
    CHECK_THROWS(predict_classes(AffinityMatrix(1, 10), 0, 11));
}

TEST_CASE("ensemble draws are uniform and reproducible") {
    Rng rng(8);
    PromptEnsemble solo{{PromptBundle{AffinityMatrix(1, 10), BottleneckPrompt(1, 4, 64, 4, true, rng)}}};
    for (int i = 0; i < 10; ++i) CHECK(ensemble_draw(solo, rng) == 0);

    PromptEnsemble four;
    for (int i = 0; i < 4; ++i) four.members.push_back(solo.members.front());
    std::vector<int> counts(4, 0);
    Rng draws(9);
    const int n = 10000;
    for (int i = 0; i < n; ++i) ++counts[ensemble_draw(four, draws)];
    const double sigma = std::sqrt(n * 0.25 * 0.75);
    for (int c : counts) CHECK(std::abs(c - n * 0.25) <= 3 * sigma);

    Rng a(10), b(10);
    for (int i = 0; i < 20; ++i) CHECK(ensemble_draw(four, a) == ensemble_draw(four, b));
    CHECK_THROWS_AS(ensemble_draw(PromptEnsemble{}, rng), InvalidArgument);
}
