#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpt/rng.hpp"
#include "dpt/tensor.hpp"
#include "dpt/world.hpp"

namespace dpt {

struct ModelConfig {
    int layers = 4;
    int embed_dim = 64;
    int heads = 4;
    int ffn_dim = 256;
    int token_count = 16;
    // Codebook size K; the MASK id is K and is never predicted.
    int vocab = 16;

    int mask_id() const { return vocab; }
    int head_dim() const { return embed_dim / heads; }
    void validate() const;
};

enum class AttentionControl { kOff, kOn };

/// Conditioning injected as extra keys/values at every layer. Queries come
/// from the sequence positions only.
struct PrefixSlots {
    // [batch, D]: one class vector (t_c, t-hat_c or t_u) per sequence.
    Tensor class_slot;
    // Empty: no prompt. Otherwise one entry per layer (deep prompt) or a
    // single entry shared by all layers. Each entry is [S, D] (shared by the
    // batch) or [batch, S, D].
    std::vector<Tensor> prompt;

    std::size_t prompt_len() const;
    std::size_t width() const { return 1 + prompt_len(); }
};

struct PrefixLayout {
    std::size_t class_slots = 1;
    std::size_t prompt_slots = 0;
};

// Pre-softmax scores after attention control. scores:[g, n, m] with the
// class column first, then the prompt columns, then the sequence. With
// control on, the class score becomes max(class, logsumexp(prompt scores)),
// which is max(class, prompt) for a single prompt slot.
Tensor controlled_scores(const Tensor& scores, PrefixLayout layout, AttentionControl mode);

// softmax(controlled(q k^T / sqrt(head_dim))). q:[g, n, dh], keys:[g, m, dh].
Tensor attention_weights(const Tensor& q, const Tensor& keys, PrefixLayout layout, AttentionControl mode);

// Post-softmax attention maps captured during an instrumented forward.
struct AttentionTrace {
    PrefixLayout layout;
    std::size_t batch = 0;
    std::size_t heads = 0;
    // Per layer, [batch * heads, N, prefix width + N].
    std::vector<Tensor> weights;
};

// z-bar: token i becomes MASK where mask[i] != 0.
TokenSequence mask_tokens(std::span<const int> tokens, std::span<const std::uint8_t> mask, int mask_id);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Bidirectional pre-norm transformer over token grids with learned
/// positional embeddings and prefix conditioning slots.
class Transformer {
public:
    Transformer(const ModelConfig& config, Rng& init_rng);

    const ModelConfig& config() const { return config_; }

    // tokens holds `batch` sequences of length N back to back; returns
    // logits [batch * N, K].
    Tensor forward(std::span<const int> tokens, std::size_t batch, const PrefixSlots& prefix, AttentionControl mode,
                   AttentionTrace* trace = nullptr) const;

    std::vector<NamedTensor> parameters() const;
    void set_trainable(bool trainable);
    std::size_t parameter_count() const;

private:
    struct Layer {
        Tensor ln1_gamma, ln1_beta;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_gamma, ln2_beta;
        Tensor w1, b1, w2, b2;
    };

    ModelConfig config_;
    Tensor token_embedding_;     // [K + 1, D]
    Tensor position_embedding_;  // [N, D]
    std::vector<Layer> layers_;
    Tensor final_gamma_, final_beta_;
    Tensor head_w_, head_b_;  // [D, K], [K]
};

}  // namespace dpt
