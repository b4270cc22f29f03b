#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dpt/model.hpp"
#include "dpt/ops.hpp"
#include "gradcheck.hpp"

namespace dpt::testing {

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradInstance {
    OpFn f;
    std::vector<Tensor> inputs;
};

// One differentiable op and a generator of random instances for it.
struct GradCase {
    std::string name;
    std::function<GradInstance(Rng&)> make;
};

inline std::size_t small_dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 5) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<int> random_ids(std::size_t n, int k, Rng& rng) {
    std::vector<int> ids(n);
    for (int& i : ids) i = std::uniform_int_distribution<int>(0, k - 1)(rng);
    return ids;
}

inline std::vector<GradCase> gradient_cases() {
    std::vector<GradCase> cases;
    cases.push_back({"matmul", [](Rng& r) {
                         const auto m = small_dim(r), k = small_dim(r), n = small_dim(r);
                         return GradInstance{[](const auto& in) { return matmul(in[0], in[1]); },
                                             {random_tensor({m, k}, r), random_tensor({k, n}, r)}};
                     }});
    cases.push_back({"linear", [](Rng& r) {
                         const auto m = small_dim(r), k = small_dim(r), n = small_dim(r);
                         return GradInstance{[](const auto& in) { return linear(in[0], in[1], in[2]); },
                                             {random_tensor({m, k}, r), random_tensor({k, n}, r),
                                              random_tensor({n}, r)}};
                     }});
    cases.push_back({"bmm", [](Rng& r) {
                         const auto g = small_dim(r, 1, 3), m = small_dim(r), k = small_dim(r), n = small_dim(r);
                         return GradInstance{[](const auto& in) { return bmm(in[0], in[1]); },
                                             {random_tensor({g, m, k}, r), random_tensor({g, k, n}, r)}};
                     }});
    cases.push_back({"bmm_transposed", [](Rng& r) {
                         const auto g = small_dim(r, 1, 3), m = small_dim(r), k = small_dim(r), n = small_dim(r);
                         return GradInstance{[](const auto& in) { return bmm(in[0], in[1], true); },
                                             {random_tensor({g, m, k}, r), random_tensor({g, n, k}, r)}};
                     }});
    cases.push_back({"add_broadcast", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r), c = small_dim(r);
                         return GradInstance{[](const auto& in) { return add(in[0], in[1]); },
                                             {random_tensor({a, b, c}, r), random_tensor({b, 1}, r)}};
                     }});
    cases.push_back({"sub_broadcast", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r);
                         return GradInstance{[](const auto& in) { return sub(in[0], in[1]); },
                                             {random_tensor({a, 1}, r), random_tensor({a, b}, r)}};
                     }});
    cases.push_back({"mul_broadcast", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r);
                         return GradInstance{[](const auto& in) { return mul(in[0], in[1]); },
                                             {random_tensor({a, b}, r), random_tensor({b}, r)}};
                     }});
    cases.push_back({"elementwise_max", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r);
                         Tensor x = random_tensor({a, b}, r);
                         Tensor y = random_tensor({a, b}, r);
                         // Keep operands apart so the finite difference never crosses a tie.
                         auto yd = y.mutable_data();
                         for (std::size_t i = 0; i < yd.size(); ++i) {
                             if (std::abs(yd[i] - x.data()[i]) < 1e-2) yd[i] += 0.1;
                         }
                         return GradInstance{[](const auto& in) { return elementwise_max(in[0], in[1]); }, {x, y}};
                     }});
    cases.push_back({"scale", [](Rng& r) {
                         return GradInstance{[](const auto& in) { return scale(in[0], -1.7); },
                                             {random_tensor({small_dim(r), small_dim(r)}, r)}};
                     }});
    cases.push_back({"sum", [](Rng& r) {
                         return GradInstance{[](const auto& in) { return sum(in[0]); },
                                             {random_tensor({small_dim(r), small_dim(r)}, r)}};
                     }});
    cases.push_back({"mean", [](Rng& r) {
                         return GradInstance{[](const auto& in) { return mean(in[0]); },
                                             {random_tensor({small_dim(r), small_dim(r)}, r)}};
                     }});
    cases.push_back({"reshape", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r);
                         return GradInstance{[a, b](const auto& in) { return reshape(in[0], {b, a}); },
                                             {random_tensor({a, b}, r)}};
                     }});
    cases.push_back({"permute", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r), c = small_dim(r);
                         return GradInstance{[](const auto& in) { return permute(in[0], {2, 0, 1}); },
                                             {random_tensor({a, b, c}, r)}};
                     }});
    cases.push_back({"broadcast_to", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r);
                         return GradInstance{[a, b](const auto& in) { return broadcast_to(in[0], {a, 2, b}); },
                                             {random_tensor({1, b}, r)}};
                     }});
    cases.push_back({"concat", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r), c = small_dim(r);
                         return GradInstance{[](const auto& in) { return concat({in[0], in[1]}, 1); },
                                             {random_tensor({a, b}, r), random_tensor({a, c}, r)}};
                     }});
    cases.push_back({"slice", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r, 2, 6);
                         return GradInstance{[b](const auto& in) { return slice(in[0], 1, 1, b); },
                                             {random_tensor({a, b}, r)}};
                     }});
    cases.push_back({"softmax", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r, 2, 6);
                         const int axis = static_cast<int>(small_dim(r, 0, 1));
                         return GradInstance{[axis](const auto& in) { return softmax(in[0], axis); },
                                             {random_tensor({a, b}, r, 2.0)}};
                     }});
    cases.push_back({"logsumexp", [](Rng& r) {
                         const auto a = small_dim(r), b = small_dim(r, 2, 6);
                         return GradInstance{[](const auto& in) { return logsumexp(in[0], -1); },
                                             {random_tensor({a, b}, r, 2.0)}};
                     }});
    cases.push_back({"layer_norm", [](Rng& r) {
                         const auto a = small_dim(r), d = small_dim(r, 2, 6);
                         return GradInstance{[](const auto& in) { return layer_norm(in[0], in[1], in[2]); },
                                             {random_tensor({a, d}, r), random_tensor({d}, r),
                                              random_tensor({d}, r)}};
                     }});
    cases.push_back({"gelu", [](Rng& r) {
                         return GradInstance{[](const auto& in) { return gelu(in[0]); },
                                             {random_tensor({small_dim(r), small_dim(r)}, r, 2.0)}};
                     }});
    cases.push_back({"embedding_gather", [](Rng& r) {
                         const auto v = small_dim(r, 2, 6), d = small_dim(r);
                         const auto ids = random_ids(small_dim(r, 1, 8), static_cast<int>(v), r);
                         return GradInstance{[ids](const auto& in) { return embedding_gather(in[0], ids); },
                                             {random_tensor({v, d}, r)}};
                     }});
    cases.push_back({"cross_entropy", [](Rng& r) {
                         const auto rows = small_dim(r, 1, 6), k = small_dim(r, 2, 6);
                         const auto targets = random_ids(rows, static_cast<int>(k), r);
                         std::vector<std::uint8_t> mask(rows);
                         for (auto& m : mask) m = static_cast<std::uint8_t>(small_dim(r, 0, 1));
                         mask[small_dim(r, 0, rows - 1)] = 1;
                         return GradInstance{
                             [targets, mask](const auto& in) { return cross_entropy(in[0], targets, mask); },
                             {random_tensor({rows, k}, r, 2.0)}};
                     }});
    cases.push_back({"attention_control", [](Rng& r) {
                         const auto g = small_dim(r, 1, 3), n = small_dim(r, 1, 4), s = small_dim(r, 1, 3);
                         const auto m = 1 + s + small_dim(r, 1, 4);
                         Tensor scores = random_tensor({g, n, m}, r);
                         // Separate the class column from the prompt logsumexp so the max is not tied.
                         auto d = scores.mutable_data();
                         for (std::size_t row = 0; row < g * n; ++row) d[row * m] += (row % 2 ? 3.0 : -3.0);
                         const PrefixLayout layout{1, s};
                         return GradInstance{[layout](const auto& in) {
                                                 return controlled_scores(in[0], layout, AttentionControl::kOn);
                                             },
                                             {scores}};
                     }});
    cases.push_back({"attention_weights", [](Rng& r) {
                         const auto g = small_dim(r, 1, 3), n = small_dim(r, 1, 4), dh = small_dim(r, 1, 4);
                         const auto m = 2 + n;
                         return GradInstance{[](const auto& in) {
                                                 return attention_weights(in[0], in[1], PrefixLayout{1, 1},
                                                                          AttentionControl::kOff);
                                             },
                                             {random_tensor({g, n, dh}, r), random_tensor({g, m, dh}, r)}};
                     }});
    return cases;
}

struct CaseResult {
    std::string name;
    int instances = 0;
    double worst = 0.0;
};

inline std::vector<CaseResult> run_gradient_suite(int instances, std::uint64_t seed) {
    std::vector<CaseResult> out;
    for (const auto& c : gradient_cases()) {
        Rng rng(derive_seed(seed, c.name));
        CaseResult res{c.name, instances, 0.0};
        for (int i = 0; i < instances; ++i) {
            GradInstance inst = c.make(rng);
            res.worst = std::max(res.worst, gradient_error(inst.f, inst.inputs, rng));
        }
        out.push_back(res);
    }
    return out;
}

}  // namespace dpt::testing
