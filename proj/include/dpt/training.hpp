#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "dpt/prompt.hpp"
#include "dpt/rng.hpp"
#include "dpt/world.hpp"

namespace dpt {

using MaskVector = std::vector<std::uint8_t>;

// u ~ U(0, 1]; ceil(cos(pi u / 2) N) positions, clamped to [1, N], chosen
// uniformly without replacement.
MaskVector sample_mask(Rng& rng, int n);
// Mask count for a given u, before choosing positions.
int mask_count(double u, int n);

struct TrainConfig {
    int steps = 1000;
    int batch = 16;
    double base_lr = 0.001;
    std::uint64_t seed = 0;
};

struct LossRecord {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct LossLog {
    std::vector<LossRecord> records;

    // Mean loss over the first / last `window` records.
    double head_mean(std::size_t window) const;
    double tail_mean(std::size_t window) const;
    void write_tsv(const std::filesystem::path& path) const;
};

// Called after every step; lets callers print progress.
using StepCallback = std::function<void(const LossRecord&)>;

// Source-class MTM pretraining of theta and W on labeled sequences.
// Throws NumericError naming the step on a non-finite loss.
LossLog pretrain(SourceModel& source, std::span<const LabeledSequence> data, const TrainConfig& config,
                 const StepCallback& on_step = {});

// MTM loss of one batch conditioned on class embeddings only.
Tensor source_batch_loss(const SourceModel& source, std::span<const TokenSequence> tokens,
                         std::span<const int> classes, std::span<const MaskVector> masks);

struct TuneOptions {
    AttentionControl control = AttentionControl::kOn;
    // Horizontal flip probability for classes whose bitmap survives a flip.
    double flip_probability = 0.5;
    // Learning-rate multiplier for the affinity logits. Adam moves each
    // logit by at most about lr per step, so at the base rate A barely
    // leaves uniform within a tuning budget.
    double affinity_lr_scale = 30.0;
};

// Prompt tuning with the backbone and class table frozen: only the affinity
// logits, prompt latent and expansions receive updates. `targets[i]` is the
// affinity row of `data[i]`.
LossLog tune(const SourceModel& source, PromptBundle& bundle, const WorldSpec& world,
             std::span<const LabeledSequence> data, std::span<const int> targets, const TrainConfig& config,
             const TuneOptions& options = {}, const StepCallback& on_step = {});

struct PromptShape {
    std::size_t tokens = 1;
    std::size_t bottleneck = 4;
    bool deep = true;
};

// Fresh bundle for `target_classes` rows: zero affinity logits and a
// prompt drawn from `init_rng`.
PromptBundle make_bundle(const SourceModel& source, std::size_t target_classes, const PromptShape& shape,
                         Rng& init_rng);

// One bundle per tune sequence, each with a single affinity row and trained
// on that sequence alone. Member i uses seeds derived from (config.seed, i).
PromptEnsemble tune_ensemble(const SourceModel& source, const WorldSpec& world, std::span<const LabeledSequence> data,
                             const PromptShape& shape, const TrainConfig& config, const TuneOptions& options = {});

// MTM loss of one tuning batch.
Tensor prompt_batch_loss(const SourceModel& source, const PromptBundle& bundle, std::span<const TokenSequence> tokens,
                         std::span<const int> targets, std::span<const MaskVector> masks, AttentionControl control);

// Horizontal grid flip with probability p; sequences of classes whose
// mirrored bitmap changes class are returned unchanged.
LabeledSequence augment(const LabeledSequence& seq, const WorldSpec& world, Rng& rng, double p = 0.5);

}  // namespace dpt
