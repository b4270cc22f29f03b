#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpt/prompt.hpp"
#include "dpt/world.hpp"

namespace dpt {

struct DecodeConfig {
    int steps = 8;
    // Tokens committed per step; empty means the cosine schedule.
    std::vector<int> schedule;
    // Guidance scale lambda.
    double guidance = 0.0;
    // Sampling temperature tau. Zero picks the argmax.
    double temperature = 1.0;
    // Gumbel noise scale on the confidence ordering; zero is plain top-k.
    double choice_temperature = 0.0;
    std::uint64_t seed = 0;
    // Unconditional pass sees t_u only (true) or t_u plus the prompt.
    bool drop_prompt = true;

    // Validates against sequence length n and returns the schedule in use.
    std::vector<int> resolved_schedule(int n) const;
};

// Per-step unmask counts: remaining masks follow ceil(n cos(pi t / 2T)),
// every step commits at least one token, the counts sum to n.
std::vector<int> cosine_schedule(int n, int steps);
void validate_schedule(std::span<const int> schedule, int n);

// (1 + lambda) cond - lambda uncond, elementwise.
std::vector<double> guided_logits(std::span<const double> cond, std::span<const double> uncond, double lambda);

/// Prefixes for the conditional and (optional) unconditional passes of a
/// decode batch.
struct Conditioning {
    PrefixSlots cond;
    AttentionControl cond_mode = AttentionControl::kOff;
    // Absent: guidance disabled, no unconditional pass is run.
    std::optional<PrefixSlots> uncond;
    AttentionControl uncond_mode = AttentionControl::kOff;
};

// Unconditional prefix: t_u for every sequence, plus `prompt` when the
// prompt is kept.
PrefixSlots unconditional_prefix(const Tensor& class_table, std::size_t batch,
                                 const std::vector<Tensor>* prompt = nullptr);

struct DecodeTrace {
    // Masked positions left after each step, per sequence.
    std::vector<std::vector<int>> remaining;
    // Prefix width seen by the unconditional pass (0 when not run).
    std::size_t uncond_width = 0;
};

// Scheduled parallel decoding of `seeds.size()` sequences from all-MASK
// input. Sequence b draws from its own stream seeded with seeds[b], so the
// result does not depend on how sequences are batched.
std::vector<TokenSequence> parallel_decode(const Transformer& model, const Conditioning& conditioning,
                                           std::span<const std::uint64_t> seeds, const DecodeConfig& config,
                                           DecodeTrace* trace = nullptr);

enum class SynthMode {
    kSource,          // class slot t_c, no prompt
    kInDistribution,  // class slot t-hat_c from the affinity row, with prompt
    kZeroShot,        // class slot t_c of a source class, with prompt
};

struct SynthRequest {
    int class_id = 0;
    SynthMode mode = SynthMode::kZeroShot;
    int count = 0;
    // Domain recorded on the output records.
    int domain_label = 0;
    // Index of the prompt set, recorded on the records.
    int prompt_id = 0;
    AttentionControl control = AttentionControl::kOn;
    // Run the unconditional pass even at lambda = 0.
    bool guidance_enabled = true;
};

// Synthesizes `request.count` sequences. In ensemble use, each sequence
// draws a member uniformly; a single prompt is an ensemble of one. Prompts
// may be null only in source mode.
std::vector<LabeledSequence> synthesize(const SourceModel& source, const PromptEnsemble* prompts,
                                        const SynthRequest& request, const DecodeConfig& config);

}  // namespace dpt
