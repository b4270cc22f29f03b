#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dpt/model.hpp"
#include "dpt/rng.hpp"
#include "dpt/tensor.hpp"

namespace dpt {

/// Pretrained backbone plus its class embedding table W ([C_src, D], rows t_c).
struct SourceModel {
    Transformer model;
    Tensor class_table;

    SourceModel(const ModelConfig& config, int class_count, Rng& init_rng);

    int class_count() const { return static_cast<int>(class_table.dim(0)); }
    // Backbone parameters followed by "class_table".
    std::vector<NamedTensor> parameters() const;
    void set_trainable(bool trainable);
};

/// Row-stochastic C_tgt x C_src matrix, stored as free logits.
struct AffinityMatrix {
    Tensor logits;  // [C_tgt, C_src]

    // Zero logits, so every row starts uniform.
    AffinityMatrix(std::size_t target_classes, std::size_t source_classes);
    explicit AffinityMatrix(Tensor logits);

    std::size_t target_count() const { return logits.dim(0); }
    std::size_t source_count() const { return logits.dim(1); }
    // Row softmax; differentiable in the logits.
    Tensor realized() const;
};

/// Class-agnostic prompt generated from a low-dimensional latent:
/// p at layer l = v U_l, with v:[S, d_b] and U_l:[d_b, D].
struct BottleneckPrompt {
    Tensor latent;                 // v
    std::vector<Tensor> expand;    // U_l, one per layer (or one shared)

    BottleneckPrompt(std::size_t tokens, std::size_t bottleneck, std::size_t embed_dim, std::size_t layers,
                     bool deep, Rng& init_rng);
    BottleneckPrompt(Tensor latent, std::vector<Tensor> expand);

    std::size_t tokens() const { return latent.dim(0); }
    std::size_t bottleneck() const { return latent.dim(1); }
    bool deep() const { return expand.size() > 1; }
    // p_phi per layer (a single entry when not deep), each [S, D].
    std::vector<Tensor> layer_prompts() const;
};

struct PromptBundle {
    AffinityMatrix affinity;
    BottleneckPrompt prompt;

    std::vector<NamedTensor> parameters() const;
    std::size_t parameter_count() const;
};

struct PromptEnsemble {
    std::vector<PromptBundle> members;
};

// t-hat_c = sum_j A[c, j] t_j, as a [D] tensor.
Tensor class_specific_prompt(int target_class, const AffinityMatrix& affinity, const Tensor& class_table);

// t_u: mean of the class table rows.
Tensor unconditional_embedding(const Tensor& class_table);

// Prefix for `batch` sequences: class slot t-hat_c broadcast over the
// batch, then the prompt slots.
PrefixSlots assemble(int target_class, const AffinityMatrix& affinity, const Tensor& class_table,
                     const BottleneckPrompt& prompt, std::size_t batch);
// Zero-shot variant: the class slot is the source embedding t_c.
PrefixSlots assemble_source_class(int source_class, const Tensor& class_table, const BottleneckPrompt& prompt,
                                  std::size_t batch);
// Source-model conditioning: class slots only.
PrefixSlots class_prefix(std::span<const int> source_classes, const Tensor& class_table);

// Top-k source classes of affinity row c, descending, ties to the lower id.
std::vector<int> predict_classes(const AffinityMatrix& affinity, int target_class, std::size_t k);

// Uniform member index.
std::size_t ensemble_draw(const PromptEnsemble& ensemble, Rng& rng);

}  // namespace dpt
