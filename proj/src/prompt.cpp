#include "dpt/prompt.hpp"

#include <algorithm>
#include <numeric>

#include "dpt/error.hpp"
#include "dpt/ops.hpp"

namespace dpt {
namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(Shape shape, Rng& rng) {
    std::normal_distribution<double> dist(0.0, kInitStd);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), true);
}

void check_table(const Tensor& class_table) {
    if (class_table.rank() != 2 || class_table.dim(0) == 0) {
        throw InvalidArgument("class table must be a non-empty [C, D] matrix, got " + shape_str(class_table.shape()));
    }
}

}  // namespace

SourceModel::SourceModel(const ModelConfig& config, int class_count, Rng& init_rng) : model(config, init_rng) {
    if (class_count < 1) throw InvalidArgument("source model needs at least one class");
    class_table = gaussian({static_cast<std::size_t>(class_count), static_cast<std::size_t>(config.embed_dim)},
                           init_rng);
}

std::vector<NamedTensor> SourceModel::parameters() const {
    auto out = model.parameters();
    out.push_back({"class_table", class_table});
    return out;
}

void SourceModel::set_trainable(bool trainable) {
    model.set_trainable(trainable);
    class_table.set_requires_grad(trainable);
}

AffinityMatrix::AffinityMatrix(std::size_t target_classes, std::size_t source_classes)
    : logits(Tensor::zeros({target_classes, source_classes}, true)) {
    if (target_classes == 0 || source_classes == 0) throw InvalidArgument("affinity matrix needs non-zero size");
}

AffinityMatrix::AffinityMatrix(Tensor l) : logits(std::move(l)) {
    if (logits.rank() != 2) throw DimensionError("affinity logits must be 2-D, got " + shape_str(logits.shape()));
}

Tensor AffinityMatrix::realized() const { return softmax(logits, 1); }

BottleneckPrompt::BottleneckPrompt(std::size_t tokens, std::size_t bottleneck, std::size_t embed_dim,
                                   std::size_t layers, bool deep, Rng& init_rng) {
    if (tokens == 0 || bottleneck == 0 || embed_dim == 0 || layers == 0) {
        throw InvalidArgument("prompt dimensions must be positive");
    }
    latent = gaussian({tokens, bottleneck}, init_rng);
    const std::size_t count = deep ? layers : 1;
    for (std::size_t l = 0; l < count; ++l) expand.push_back(gaussian({bottleneck, embed_dim}, init_rng));
}

BottleneckPrompt::BottleneckPrompt(Tensor v, std::vector<Tensor> u) : latent(std::move(v)), expand(std::move(u)) {
    if (latent.rank() != 2 || expand.empty()) throw DimensionError("prompt latent must be [S, d_b] with >= 1 expansion");
    for (const auto& e : expand) {
        if (e.rank() != 2 || e.dim(0) != latent.dim(1)) {
            throw DimensionError("prompt expansion " + shape_str(e.shape()) + " does not match latent " +
                                 shape_str(latent.shape()));
        }
    }
}

std::vector<Tensor> BottleneckPrompt::layer_prompts() const {
    std::vector<Tensor> out;
    out.reserve(expand.size());
    for (const auto& u : expand) out.push_back(matmul(latent, u));
    return out;
}

std::vector<NamedTensor> PromptBundle::parameters() const {
    std::vector<NamedTensor> out{{"affinity_logits", affinity.logits}, {"prompt_latent", prompt.latent}};
    for (std::size_t l = 0; l < prompt.expand.size(); ++l) {
        out.push_back({"prompt_expand" + std::to_string(l), prompt.expand[l]});
    }
    return out;
}

std::size_t PromptBundle::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

Tensor class_specific_prompt(int target_class, const AffinityMatrix& affinity, const Tensor& class_table) {
    check_table(class_table);
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= affinity.target_count()) {
        throw InvalidArgument("target class " + std::to_string(target_class) + " outside affinity matrix with " +
                              std::to_string(affinity.target_count()) + " rows");
    }
    if (affinity.source_count() != class_table.dim(0)) {
        throw DimensionError("affinity has " + std::to_string(affinity.source_count()) + " columns but the table has " +
                             std::to_string(class_table.dim(0)) + " classes");
    }
    const auto c = static_cast<std::size_t>(target_class);
    Tensor row = softmax(slice(affinity.logits, 0, c, c + 1), 1);
    return reshape(matmul(row, class_table), {class_table.dim(1)});
}

Tensor unconditional_embedding(const Tensor& class_table) {
    check_table(class_table);
    const std::size_t c = class_table.dim(0), d = class_table.dim(1);
    return reshape(matmul(Tensor::full({1, c}, 1.0 / static_cast<double>(c)), class_table), {d});
}

PrefixSlots assemble(int target_class, const AffinityMatrix& affinity, const Tensor& class_table,
                     const BottleneckPrompt& prompt, std::size_t batch) {
    Tensor t = class_specific_prompt(target_class, affinity, class_table);
    if (prompt.expand.front().dim(1) != t.dim(0)) {
        throw DimensionError("prompt width " + std::to_string(prompt.expand.front().dim(1)) +
                             " does not match class embedding width " + std::to_string(t.dim(0)));
    }
    return PrefixSlots{broadcast_to(reshape(t, {1, t.dim(0)}), {batch, t.dim(0)}), prompt.layer_prompts()};
}

PrefixSlots assemble_source_class(int source_class, const Tensor& class_table, const BottleneckPrompt& prompt,
                                  std::size_t batch) {
    check_table(class_table);
    if (source_class < 0 || static_cast<std::size_t>(source_class) >= class_table.dim(0)) {
        throw InvalidArgument("source class " + std::to_string(source_class) + " out of range");
    }
    const std::vector<int> ids(batch, source_class);
    return PrefixSlots{embedding_gather(class_table, ids), prompt.layer_prompts()};
}

PrefixSlots class_prefix(std::span<const int> source_classes, const Tensor& class_table) {
    check_table(class_table);
    return PrefixSlots{embedding_gather(class_table, source_classes), {}};
}

std::vector<int> predict_classes(const AffinityMatrix& affinity, int target_class, std::size_t k) {
    if (k > affinity.source_count()) {
        throw InvalidArgument("k = " + std::to_string(k) + " exceeds " + std::to_string(affinity.source_count()) +
                              " source classes");
    }
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= affinity.target_count()) {
        throw InvalidArgument("target class " + std::to_string(target_class) + " out of range");
    }
    const std::size_t n = affinity.source_count();
    // Softmax is monotone, so ranking the logits ranks A.
    auto row = affinity.logits.data().subspan(static_cast<std::size_t>(target_class) * n, n);
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return row[a] > row[b]; });
    ids.resize(k);
    return ids;
}

std::size_t ensemble_draw(const PromptEnsemble& ensemble, Rng& rng) {
    if (ensemble.members.empty()) throw InvalidArgument("cannot draw from an empty prompt ensemble");
    return std::uniform_int_distribution<std::size_t>(0, ensemble.members.size() - 1)(rng);
}

}  // namespace dpt
