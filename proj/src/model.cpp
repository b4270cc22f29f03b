#include "dpt/model.hpp"

#include <cmath>

#include "dpt/error.hpp"
#include "dpt/ops.hpp"

namespace dpt {
namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data), true);
}

// [rows * per, D] -> [groups * heads, per, head_dim]
Tensor split_heads(const Tensor& x, std::size_t groups, std::size_t per, std::size_t heads, std::size_t dh) {
    Tensor t = permute(reshape(x, {groups, per, heads, dh}), {0, 2, 1, 3});
    return reshape(t, {groups * heads, per, dh});
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || embed_dim < 1 || heads < 1 || ffn_dim < 1 || token_count < 1 || vocab < 1) {
        throw InvalidArgument("model dimensions must be positive");
    }
    if (embed_dim % heads != 0) {
        throw InvalidArgument("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
    }
}

std::size_t PrefixSlots::prompt_len() const {
    if (prompt.empty()) return 0;
    const Tensor& p = prompt.front();
    return p.rank() == 3 ? p.dim(1) : p.dim(0);
}

Tensor controlled_scores(const Tensor& scores, PrefixLayout layout, AttentionControl mode) {
    if (mode == AttentionControl::kOff) return scores;
    if (layout.prompt_slots == 0) throw InvalidArgument("attention control requires at least one prompt slot");
    if (layout.class_slots != 1) throw InvalidArgument("attention control expects exactly one class slot");
    if (scores.rank() != 3 || scores.dim(2) < 1 + layout.prompt_slots) {
        throw DimensionError("scores " + shape_str(scores.shape()) + " too narrow for the prefix layout");
    }
    const std::size_t g = scores.dim(0), n = scores.dim(1), m = scores.dim(2);
    Tensor cls = slice(scores, 2, 0, 1);
    Tensor prompt = slice(scores, 2, 1, 1 + layout.prompt_slots);
    Tensor prompt_score = reshape(logsumexp(prompt, 2), {g, n, 1});
    Tensor rest = slice(scores, 2, 1, m);
    return concat({elementwise_max(cls, prompt_score), rest}, 2);
}

Tensor attention_weights(const Tensor& q, const Tensor& keys, PrefixLayout layout, AttentionControl mode) {
    const double factor = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
    Tensor scores = scale(bmm(q, keys, /*transpose_b=*/true), factor);
    return softmax(controlled_scores(scores, layout, mode), 2);
}

TokenSequence mask_tokens(std::span<const int> tokens, std::span<const std::uint8_t> mask, int mask_id) {
    if (tokens.size() != mask.size()) {
        throw DimensionError("mask length " + std::to_string(mask.size()) + " does not match " +
                             std::to_string(tokens.size()) + " tokens");
    }
    TokenSequence out(tokens.begin(), tokens.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask[i]) out[i] = mask_id;
    }
    return out;
}

Transformer::Transformer(const ModelConfig& config, Rng& init_rng) : config_(config) {
    config_.validate();
    const auto d = static_cast<std::size_t>(config_.embed_dim);
    const auto f = static_cast<std::size_t>(config_.ffn_dim);
    const auto k = static_cast<std::size_t>(config_.vocab);
    constexpr double kStd = 0.02;
    token_embedding_ = gaussian({k + 1, d}, kStd, init_rng);
    position_embedding_ = gaussian({static_cast<std::size_t>(config_.token_count), d}, kStd, init_rng);
    for (int l = 0; l < config_.layers; ++l) {
        Layer layer;
        layer.ln1_gamma = Tensor::full({d}, 1.0, true);
        layer.ln1_beta = Tensor::zeros({d}, true);
        layer.wq = gaussian({d, d}, kStd, init_rng);
        layer.bq = Tensor::zeros({d}, true);
        layer.wk = gaussian({d, d}, kStd, init_rng);
        layer.bk = Tensor::zeros({d}, true);
        layer.wv = gaussian({d, d}, kStd, init_rng);
        layer.bv = Tensor::zeros({d}, true);
        layer.wo = gaussian({d, d}, kStd, init_rng);
        layer.bo = Tensor::zeros({d}, true);
        layer.ln2_gamma = Tensor::full({d}, 1.0, true);
        layer.ln2_beta = Tensor::zeros({d}, true);
        layer.w1 = gaussian({d, f}, kStd, init_rng);
        layer.b1 = Tensor::zeros({f}, true);
        layer.w2 = gaussian({f, d}, kStd, init_rng);
        layer.b2 = Tensor::zeros({d}, true);
        layers_.push_back(std::move(layer));
    }
    final_gamma_ = Tensor::full({d}, 1.0, true);
    final_beta_ = Tensor::zeros({d}, true);
    // Zero output projection: training starts from uniform logits.
    head_w_ = Tensor::zeros({d, k}, true);
    head_b_ = Tensor::zeros({k}, true);
}

Tensor Transformer::forward(std::span<const int> tokens, std::size_t batch, const PrefixSlots& prefix,
                            AttentionControl mode, AttentionTrace* trace) const {
    const auto n = static_cast<std::size_t>(config_.token_count);
    const auto d = static_cast<std::size_t>(config_.embed_dim);
    const auto h = static_cast<std::size_t>(config_.heads);
    const auto dh = static_cast<std::size_t>(config_.head_dim());
    if (batch == 0 || tokens.size() != batch * n) {
        throw DimensionError("forward expects " + std::to_string(batch) + " x " + std::to_string(n) + " tokens, got " +
                             std::to_string(tokens.size()));
    }
    for (int t : tokens) {
        if (t < 0 || t > config_.mask_id()) throw InvalidArgument("token id " + std::to_string(t) + " out of range");
    }
    if (!prefix.class_slot.defined() || prefix.class_slot.shape() != Shape{batch, d}) {
        throw DimensionError("class slot must be [" + std::to_string(batch) + ", " + std::to_string(d) + "]");
    }
    const std::size_t s = prefix.prompt_len();
    if (!prefix.prompt.empty() && prefix.prompt.size() != 1 &&
        prefix.prompt.size() != static_cast<std::size_t>(config_.layers)) {
        throw DimensionError("prompt must have 1 or " + std::to_string(config_.layers) + " layer entries");
    }
    for (const auto& p : prefix.prompt) {
        const bool shared = p.shape() == Shape{s, d};
        const bool per_seq = p.shape() == Shape{batch, s, d};
        if (!shared && !per_seq) throw DimensionError("prompt entry has shape " + shape_str(p.shape()));
    }
    if (mode == AttentionControl::kOn && s == 0) {
        throw InvalidArgument("attention control requires a prompt slot");
    }
    const PrefixLayout layout{1, s};
    const std::size_t m = 1 + s + n;
    if (trace) {
        trace->layout = layout;
        trace->batch = batch;
        trace->heads = h;
        trace->weights.clear();
    }

    Tensor x = embedding_gather(token_embedding_, tokens);
    x = reshape(add(reshape(x, {batch, n, d}), position_embedding_), {batch * n, d});

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& L = layers_[l];
        Tensor hn = layer_norm(x, L.ln1_gamma, L.ln1_beta);
        Tensor q = linear(hn, L.wq, L.bq);
        // Prefix slots are inputs to this layer like the sequence, so they share its pre-attention norm.
        Tensor cn = layer_norm(prefix.class_slot, L.ln1_gamma, L.ln1_beta);
        std::vector<Tensor> key_parts{reshape(linear(cn, L.wk, L.bk), {batch, 1, d})};
        std::vector<Tensor> value_parts{reshape(linear(cn, L.wv, L.bv), {batch, 1, d})};
        if (s > 0) {
            const Tensor& p = prefix.prompt.size() == 1 ? prefix.prompt[0] : prefix.prompt[l];
            if (p.rank() == 2) {
                Tensor pn = layer_norm(p, L.ln1_gamma, L.ln1_beta);
                key_parts.push_back(broadcast_to(linear(pn, L.wk, L.bk), {batch, s, d}));
                value_parts.push_back(broadcast_to(linear(pn, L.wv, L.bv), {batch, s, d}));
            } else {
                Tensor pn = layer_norm(reshape(p, {batch * s, d}), L.ln1_gamma, L.ln1_beta);
                key_parts.push_back(reshape(linear(pn, L.wk, L.bk), {batch, s, d}));
                value_parts.push_back(reshape(linear(pn, L.wv, L.bv), {batch, s, d}));
            }
        }
        key_parts.push_back(reshape(linear(hn, L.wk, L.bk), {batch, n, d}));
        value_parts.push_back(reshape(linear(hn, L.wv, L.bv), {batch, n, d}));
        Tensor keys = split_heads(concat(key_parts, 1), batch, m, h, dh);
        Tensor values = split_heads(concat(value_parts, 1), batch, m, h, dh);
        Tensor queries = split_heads(q, batch, n, h, dh);

        Tensor attn = attention_weights(queries, keys, layout, mode);
        if (trace) trace->weights.push_back(attn.detach());
        Tensor mixed = bmm(attn, values);  // [batch * h, n, dh]
        mixed = reshape(permute(reshape(mixed, {batch, h, n, dh}), {0, 2, 1, 3}), {batch * n, d});
        x = add(x, linear(mixed, L.wo, L.bo));

        Tensor hn2 = layer_norm(x, L.ln2_gamma, L.ln2_beta);
        x = add(x, linear(gelu(linear(hn2, L.w1, L.b1)), L.w2, L.b2));
    }
    x = layer_norm(x, final_gamma_, final_beta_);
    return linear(x, head_w_, head_b_);
}

std::vector<NamedTensor> Transformer::parameters() const {
    std::vector<NamedTensor> out{{"tok_emb", token_embedding_}, {"pos_emb", position_embedding_}};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& L = layers_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "ln1.gamma", L.ln1_gamma});
        out.push_back({p + "ln1.beta", L.ln1_beta});
        out.push_back({p + "attn.wq", L.wq});
        out.push_back({p + "attn.bq", L.bq});
        out.push_back({p + "attn.wk", L.wk});
        out.push_back({p + "attn.bk", L.bk});
        out.push_back({p + "attn.wv", L.wv});
        out.push_back({p + "attn.bv", L.bv});
        out.push_back({p + "attn.wo", L.wo});
        out.push_back({p + "attn.bo", L.bo});
        out.push_back({p + "ln2.gamma", L.ln2_gamma});
        out.push_back({p + "ln2.beta", L.ln2_beta});
        out.push_back({p + "ffn.w1", L.w1});
        out.push_back({p + "ffn.b1", L.b1});
        out.push_back({p + "ffn.w2", L.w2});
        out.push_back({p + "ffn.b2", L.b2});
    }
    out.push_back({"final_ln.gamma", final_gamma_});
    out.push_back({"final_ln.beta", final_beta_});
    out.push_back({"head.w", head_w_});
    out.push_back({"head.b", head_b_});
    return out;
}

void Transformer::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

std::size_t Transformer::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

}  // namespace dpt
