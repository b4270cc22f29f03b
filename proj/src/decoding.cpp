#include "dpt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "dpt/error.hpp"
#include "dpt/ops.hpp"

namespace dpt {
namespace {

// Largest decode batch run through one forward pass.
constexpr std::size_t kChunk = 256;

// Draws an index from unnormalized log-weights; returns (index, probability).
std::pair<int, double> sample_row(std::span<const double> rho, double temperature, Rng& rng) {
    const int k = static_cast<int>(rho.size());
    if (temperature == 0.0) {
        const int best = static_cast<int>(std::max_element(rho.begin(), rho.end()) - rho.begin());
        // Confidence of the argmax under the untempered distribution.
        double z = 0.0;
        for (double r : rho) z += std::exp(r - rho[best]);
        return {best, 1.0 / z};
    }
    const double mx = *std::max_element(rho.begin(), rho.end());
    std::vector<double> p(rho.size());
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
        p[j] = std::exp((rho[j] - mx) / temperature);
        z += p[j];
    }
    const double u = uniform01(rng) * z;
    double acc = 0.0;
    int pick = k - 1;
    for (int j = 0; j < k; ++j) {
        acc += p[j];
        if (u < acc) {
            pick = j;
            break;
        }
    }
    return {pick, p[pick] / z};
}

double gumbel(Rng& rng) {
    const double u = std::max(uniform01(rng), std::numeric_limits<double>::min());
    return -std::log(-std::log(u));
}

PrefixSlots slice_prefix(const PrefixSlots& prefix, std::size_t begin, std::size_t end) {
    PrefixSlots out;
    out.class_slot = slice(prefix.class_slot, 0, begin, end);
    for (const auto& p : prefix.prompt) out.prompt.push_back(p.rank() == 3 ? slice(p, 0, begin, end) : p);
    return out;
}

std::size_t prefix_batch(const PrefixSlots& prefix) { return prefix.class_slot.dim(0); }

}  // namespace

std::vector<int> cosine_schedule(int n, int steps) {
    if (n < 1) throw InvalidArgument("sequence length must be >= 1");
    if (steps < 1 || steps > n) {
        throw InvalidArgument("decode steps must lie in [1, " + std::to_string(n) + "], got " + std::to_string(steps));
    }
    std::vector<int> out;
    int prev = n;
    for (int t = 1; t <= steps; ++t) {
        int remaining = 0;
        if (t < steps) {
            remaining = static_cast<int>(std::ceil(n * std::cos(std::numbers::pi * t / (2.0 * steps))));
        }
        // Commit at least one token now and leave at least one per later step.
        remaining = std::max(std::min(remaining, prev - 1), steps - t);
        out.push_back(prev - remaining);
        prev = remaining;
    }
    return out;
}

void validate_schedule(std::span<const int> schedule, int n) {
    if (schedule.empty()) throw InvalidArgument("decode schedule is empty");
    int total = 0;
    for (int c : schedule) {
        if (c < 1) throw InvalidArgument("every decode step must commit at least one token");
        total += c;
    }
    if (total != n) {
        throw InvalidArgument("decode schedule commits " + std::to_string(total) + " tokens, expected " +
                              std::to_string(n));
    }
}

std::vector<int> DecodeConfig::resolved_schedule(int n) const {
    if (guidance < 0.0) throw InvalidArgument("guidance scale must be >= 0");
    if (temperature < 0.0 || choice_temperature < 0.0) throw InvalidArgument("temperatures must be >= 0");
    if (schedule.empty()) return cosine_schedule(n, steps);
    if (schedule.size() != static_cast<std::size_t>(steps)) {
        throw InvalidArgument("schedule has " + std::to_string(schedule.size()) + " entries for " +
                              std::to_string(steps) + " steps");
    }
    validate_schedule(schedule, n);
    return schedule;
}

std::vector<double> guided_logits(std::span<const double> cond, std::span<const double> uncond, double lambda) {
    if (lambda < 0.0) throw InvalidArgument("guidance scale must be >= 0");
    if (cond.size() != uncond.size()) throw DimensionError("conditional and unconditional logits differ in size");
    std::vector<double> out(cond.size());
    for (std::size_t i = 0; i < cond.size(); ++i) out[i] = (1.0 + lambda) * cond[i] - lambda * uncond[i];
    return out;
}

PrefixSlots unconditional_prefix(const Tensor& class_table, std::size_t batch, const std::vector<Tensor>* prompt) {
    Tensor tu = unconditional_embedding(class_table);
    PrefixSlots out{broadcast_to(reshape(tu, {1, tu.dim(0)}), {batch, tu.dim(0)}), {}};
    if (prompt) out.prompt = *prompt;
    return out;
}

std::vector<TokenSequence> parallel_decode(const Transformer& model, const Conditioning& conditioning,
                                           std::span<const std::uint64_t> seeds, const DecodeConfig& config,
                                           DecodeTrace* trace) {
    const int n = model.config().token_count;
    const int k = model.config().vocab;
    const std::vector<int> schedule = config.resolved_schedule(n);
    const std::size_t batch = seeds.size();
    if (batch == 0) return {};
    if (prefix_batch(conditioning.cond) != batch ||
        (conditioning.uncond && prefix_batch(*conditioning.uncond) != batch)) {
        throw DimensionError("conditioning prefixes do not match the decode batch of " + std::to_string(batch));
    }
    NoGradGuard no_grad;
    if (trace) {
        trace->remaining.assign(batch, {});
        trace->uncond_width = conditioning.uncond ? conditioning.uncond->width() : 0;
    }

    std::vector<TokenSequence> out(batch, TokenSequence(static_cast<std::size_t>(n), model.config().mask_id()));
    for (std::size_t begin = 0; begin < batch; begin += kChunk) {
        const std::size_t end = std::min(batch, begin + kChunk);
        const std::size_t b = end - begin;
        const bool whole = begin == 0 && end == batch;
        const PrefixSlots cond = whole ? conditioning.cond : slice_prefix(conditioning.cond, begin, end);
        std::optional<PrefixSlots> uncond;
        if (conditioning.uncond) uncond = whole ? *conditioning.uncond : slice_prefix(*conditioning.uncond, begin, end);
        std::vector<Rng> rngs;
        for (std::size_t i = begin; i < end; ++i) rngs.emplace_back(seeds[i]);

        std::vector<int> flat(b * static_cast<std::size_t>(n));
        for (int count : schedule) {
            for (std::size_t i = 0; i < b; ++i) std::copy(out[begin + i].begin(), out[begin + i].end(), flat.begin() + static_cast<std::ptrdiff_t>(i * n));
            Tensor cond_logits = model.forward(flat, b, cond, conditioning.cond_mode);
            std::vector<double> rho(cond_logits.data().begin(), cond_logits.data().end());
            if (uncond) {
                Tensor uncond_logits = model.forward(flat, b, *uncond, conditioning.uncond_mode);
                rho = guided_logits(rho, uncond_logits.data(), config.guidance);
            }
            for (std::size_t i = 0; i < b; ++i) {
                TokenSequence& seq = out[begin + i];
                Rng& rng = rngs[i];
                struct Candidate {
                    int pos;
                    int token;
                    double key;
                };
                std::vector<Candidate> cands;
                for (int p = 0; p < n; ++p) {
                    if (seq[static_cast<std::size_t>(p)] != model.config().mask_id()) continue;
                    const auto row = std::span<const double>(rho).subspan((i * n + p) * static_cast<std::size_t>(k),
                                                                          static_cast<std::size_t>(k));
                    auto [token, prob] = sample_row(row, config.temperature, rng);
                    double key = prob;
                    if (config.choice_temperature > 0.0) key = std::log(prob) + config.choice_temperature * gumbel(rng);
                    cands.push_back({p, token, key});
                }
                // Stable: equal confidence keeps the lower position first.
                std::stable_sort(cands.begin(), cands.end(),
                                 [](const Candidate& a, const Candidate& c) { return a.key > c.key; });
                const std::size_t take = std::min(cands.size(), static_cast<std::size_t>(count));
                for (std::size_t j = 0; j < take; ++j) seq[static_cast<std::size_t>(cands[j].pos)] = cands[j].token;
                if (trace) {
                    trace->remaining[begin + i].push_back(static_cast<int>(
                        std::count(seq.begin(), seq.end(), model.config().mask_id())));
                }
            }
        }
    }
    return out;
}

std::vector<LabeledSequence> synthesize(const SourceModel& source, const PromptEnsemble* prompts,
                                        const SynthRequest& request, const DecodeConfig& config) {
    if (request.count < 0) throw InvalidArgument("synthesis count must be >= 0");
    if (request.count == 0) return {};
    const bool uses_prompt = request.mode != SynthMode::kSource;
    if (uses_prompt && (!prompts || prompts->members.empty())) {
        throw InvalidArgument("prompted synthesis needs at least one prompt");
    }
    if (request.mode == SynthMode::kInDistribution) {
        for (const auto& m : prompts->members) {
            if (request.class_id < 0 || static_cast<std::size_t>(request.class_id) >= m.affinity.target_count()) {
                throw InvalidArgument("unknown target class " + std::to_string(request.class_id));
            }
        }
    } else if (request.class_id < 0 || request.class_id >= source.class_count()) {
        throw InvalidArgument("unknown source class " + std::to_string(request.class_id));
    }
    NoGradGuard no_grad;
    const auto count = static_cast<std::size_t>(request.count);
    const std::size_t d = source.class_table.dim(1);
    const std::uint64_t class_seed =
        derive_seed(derive_seed(config.seed, "decode"), static_cast<std::uint64_t>(request.class_id));
    std::vector<std::uint64_t> seeds(count);
    for (std::size_t i = 0; i < count; ++i) seeds[i] = derive_seed(class_seed, static_cast<std::uint64_t>(i));

    Conditioning cond;
    std::vector<Tensor> prompt_entries;
    if (!uses_prompt) {
        const std::vector<int> ids(count, request.class_id);
        cond.cond = class_prefix(ids, source.class_table);
    } else {
        // Member per sequence, then per-sequence class slots and prompts.
        Rng member_rng = make_rng(class_seed, "ensemble");
        std::vector<std::size_t> member(count);
        for (auto& m : member) m = ensemble_draw(*prompts, member_rng);
        std::vector<Tensor> class_rows;
        std::vector<std::vector<Tensor>> layer_prompts;
        for (const auto& m : prompts->members) {
            if (request.mode == SynthMode::kInDistribution) {
                class_rows.push_back(reshape(class_specific_prompt(request.class_id, m.affinity, source.class_table),
                                             {1, d}));
            }
            layer_prompts.push_back(m.prompt.layer_prompts());
        }
        if (request.mode == SynthMode::kInDistribution) {
            std::vector<int> rows(member.begin(), member.end());
            cond.cond.class_slot = embedding_gather(concat(class_rows, 0), rows);
        } else {
            const std::vector<int> ids(count, request.class_id);
            cond.cond.class_slot = embedding_gather(source.class_table, ids);
        }
        const std::size_t layers = layer_prompts.front().size();
        for (std::size_t l = 0; l < layers; ++l) {
            if (prompts->members.size() == 1) {
                prompt_entries.push_back(layer_prompts.front()[l]);
                continue;
            }
            const std::size_t s = layer_prompts.front()[l].dim(0);
            std::vector<Tensor> stacked;
            for (const auto& lp : layer_prompts) {
                if (lp.size() != layers) throw DimensionError("ensemble members have different prompt depths");
                stacked.push_back(reshape(lp[l], {s * d}));
            }
            std::vector<int> rows(member.begin(), member.end());
            Tensor table = reshape(concat(stacked, 0), {prompts->members.size(), s * d});
            prompt_entries.push_back(reshape(embedding_gather(table, rows), {count, s, d}));
        }
        cond.cond.prompt = prompt_entries;
        cond.cond_mode = request.control;
    }
    if (request.guidance_enabled) {
        const bool keep_prompt = uses_prompt && !config.drop_prompt;
        cond.uncond = unconditional_prefix(source.class_table, count, keep_prompt ? &prompt_entries : nullptr);
        cond.uncond_mode = keep_prompt ? request.control : AttentionControl::kOff;
    }

    const std::vector<TokenSequence> tokens = parallel_decode(source.model, cond, seeds, config);
    std::vector<LabeledSequence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        LabeledSequence s;
        s.tokens = tokens[i];
        s.class_id = request.class_id;
        s.domain_id = request.domain_label;
        s.synth = SynthTag{request.prompt_id, config.guidance, seeds[i]};
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace dpt
