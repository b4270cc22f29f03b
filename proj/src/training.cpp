#include "dpt/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dpt/error.hpp"
#include "dpt/ini.hpp"
#include "dpt/ops.hpp"
#include "dpt/optim.hpp"

namespace dpt {
namespace {

void check_config(const TrainConfig& config) {
    if (config.steps < 1) throw InvalidArgument("training needs steps >= 1");
    if (config.batch < 1) throw InvalidArgument("training needs batch >= 1");
    if (!(config.base_lr > 0.0)) throw InvalidArgument("learning rate must be positive");
}

// Flattens a batch into model input and loss targets.
struct FlatBatch {
    std::vector<int> inputs;
    std::vector<int> targets;
    MaskVector mask;
};

FlatBatch flatten(std::span<const TokenSequence> tokens, std::span<const MaskVector> masks, int mask_id) {
    if (tokens.size() != masks.size()) throw DimensionError("batch has mismatched token and mask counts");
    FlatBatch out;
    for (std::size_t b = 0; b < tokens.size(); ++b) {
        const TokenSequence masked = mask_tokens(tokens[b], masks[b], mask_id);
        out.inputs.insert(out.inputs.end(), masked.begin(), masked.end());
        out.targets.insert(out.targets.end(), tokens[b].begin(), tokens[b].end());
        out.mask.insert(out.mask.end(), masks[b].begin(), masks[b].end());
    }
    return out;
}

// Evaluates one step's loss; any numeric failure is reported with the step.
template <typename F>
std::pair<Tensor, double> checked_loss(int step, F&& compute) {
    try {
        Tensor loss = compute();
        const double v = loss.item();
        if (!std::isfinite(v)) throw NumericError("non-finite loss");
        return {loss, v};
    } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
    }
}

}  // namespace

int mask_count(double u, int n) {
    const double raw = std::ceil(std::cos(std::numbers::pi * u / 2.0) * n);
    return std::clamp(static_cast<int>(raw), 1, n);
}

MaskVector sample_mask(Rng& rng, int n) {
    if (n < 1) throw InvalidArgument("mask length must be >= 1");
    // uniform01 is [0, 1); 1 - u maps it onto (0, 1].
    const int count = mask_count(1.0 - uniform01(rng), n);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    for (int i = 0; i < count; ++i) {
        std::uniform_int_distribution<int> pick(i, n - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    MaskVector m(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < count; ++i) m[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    return m;
}

double LossLog::head_mean(std::size_t window) const {
    const std::size_t n = std::min(window, records.size());
    if (n == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += records[i].loss;
    return s / static_cast<double>(n);
}

double LossLog::tail_mean(std::size_t window) const {
    const std::size_t n = std::min(window, records.size());
    if (n == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = records.size() - n; i < records.size(); ++i) s += records[i].loss;
    return s / static_cast<double>(n);
}

void LossLog::write_tsv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss log " + path.string());
    out << "step\tloss\tlr\n";
    for (const auto& r : records) out << r.step << '\t' << format_double(r.loss) << '\t' << format_double(r.lr) << '\n';
    if (!out) throw IoError("failed writing loss log " + path.string());
}

Tensor source_batch_loss(const SourceModel& source, std::span<const TokenSequence> tokens,
                         std::span<const int> classes, std::span<const MaskVector> masks) {
    const FlatBatch flat = flatten(tokens, masks, source.model.config().mask_id());
    Tensor logits = source.model.forward(flat.inputs, tokens.size(), class_prefix(classes, source.class_table),
                                         AttentionControl::kOff);
    return cross_entropy(logits, flat.targets, flat.mask);
}

LossLog pretrain(SourceModel& source, std::span<const LabeledSequence> data, const TrainConfig& config,
                 const StepCallback& on_step) {
    check_config(config);
    if (data.empty()) throw InvalidArgument("pretraining set is empty");
    const int n = source.model.config().token_count;
    for (const auto& s : data) {
        if (static_cast<int>(s.tokens.size()) != n) throw DimensionError("pretraining sequence of wrong length");
        if (s.class_id < 0 || s.class_id >= source.class_count()) {
            throw InvalidArgument("pretraining class " + std::to_string(s.class_id) + " outside the class table");
        }
    }
    source.set_trainable(true);
    std::vector<Tensor> params;
    for (auto& p : source.parameters()) params.push_back(p.tensor);
    Adam adam(params);
    Rng batch_rng = make_rng(config.seed, "batch");
    Rng mask_rng = make_rng(config.seed, "mask");
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

    LossLog log;
    const auto b = static_cast<std::size_t>(config.batch);
    std::vector<TokenSequence> tokens(b);
    std::vector<int> classes(b);
    std::vector<MaskVector> masks(b);
    for (int step = 0; step < config.steps; ++step) {
        for (std::size_t i = 0; i < b; ++i) {
            const LabeledSequence& s = data[pick(batch_rng)];
            tokens[i] = s.tokens;
            classes[i] = s.class_id;
            masks[i] = sample_mask(mask_rng, n);
        }
        auto [loss, value] = checked_loss(step, [&] { return source_batch_loss(source, tokens, classes, masks); });
        const double lr = cosine_lr(step, config.steps, config.base_lr);
        adam.zero_grad();
        loss.backward();
        adam.step(lr);
        log.records.push_back({step, value, lr});
        if (on_step) on_step(log.records.back());
    }
    return log;
}

Tensor prompt_batch_loss(const SourceModel& source, const PromptBundle& bundle, std::span<const TokenSequence> tokens,
                         std::span<const int> targets, std::span<const MaskVector> masks, AttentionControl control) {
    const FlatBatch flat = flatten(tokens, masks, source.model.config().mask_id());
    // Rows t-hat_c for every target class, then one per sequence.
    Tensor class_rows = matmul(bundle.affinity.realized(), source.class_table);
    PrefixSlots prefix{embedding_gather(class_rows, targets), bundle.prompt.layer_prompts()};
    Tensor logits = source.model.forward(flat.inputs, tokens.size(), prefix, control);
    return cross_entropy(logits, flat.targets, flat.mask);
}

LossLog tune(const SourceModel& source, PromptBundle& bundle, const WorldSpec& world,
             std::span<const LabeledSequence> data, std::span<const int> targets, const TrainConfig& config,
             const TuneOptions& options, const StepCallback& on_step) {
    check_config(config);
    if (data.empty()) throw InvalidArgument("tune set is empty");
    if (targets.size() != data.size()) throw DimensionError("tune set and target-class list differ in length");
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= bundle.affinity.target_count()) {
            throw InvalidArgument("tune target class " + std::to_string(t) + " outside the affinity matrix");
        }
    }
    if (bundle.affinity.source_count() != static_cast<std::size_t>(source.class_count())) {
        throw DimensionError("affinity columns do not match the source class table");
    }
    // The backbone and table are shared handles; freezing them keeps them
    // off the tape so no gradient can reach them. Flags are restored on exit.
    struct Freeze {
        std::vector<NamedTensor> params;
        std::vector<bool> flags;
        explicit Freeze(std::vector<NamedTensor> p) : params(std::move(p)) {
            for (auto& t : params) {
                flags.push_back(t.tensor.requires_grad());
                t.tensor.set_requires_grad(false);
            }
        }
        ~Freeze() {
            for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.set_requires_grad(flags[i]);
        }
    } freeze(source.parameters());
    if (!(options.affinity_lr_scale > 0.0)) throw InvalidArgument("affinity_lr_scale must be positive");
    bundle.affinity.logits.set_requires_grad(true);
    std::vector<Tensor> prompt_params{bundle.prompt.latent};
    for (auto& u : bundle.prompt.expand) prompt_params.push_back(u);
    for (auto& p : prompt_params) p.set_requires_grad(true);
    Adam adam(prompt_params);
    Adam affinity_adam({bundle.affinity.logits});
    Rng batch_rng = make_rng(config.seed, "batch");
    Rng mask_rng = make_rng(config.seed, "mask");
    Rng aug_rng = make_rng(config.seed, "augment");
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    const int n = world.token_count();

    LossLog log;
    const auto b = static_cast<std::size_t>(config.batch);
    std::vector<TokenSequence> tokens(b);
    std::vector<int> rows(b);
    std::vector<MaskVector> masks(b);
    for (int step = 0; step < config.steps; ++step) {
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t k = pick(batch_rng);
            tokens[i] = augment(data[k], world, aug_rng, options.flip_probability).tokens;
            rows[i] = targets[k];
            masks[i] = sample_mask(mask_rng, n);
        }
        auto [loss, value] =
            checked_loss(step, [&] { return prompt_batch_loss(source, bundle, tokens, rows, masks, options.control); });
        const double lr = cosine_lr(step, config.steps, config.base_lr);
        adam.zero_grad();
        affinity_adam.zero_grad();
        loss.backward();
        adam.step(lr);
        affinity_adam.step(lr * options.affinity_lr_scale);
        log.records.push_back({step, value, lr});
        if (on_step) on_step(log.records.back());
    }
    return log;
}

PromptBundle make_bundle(const SourceModel& source, std::size_t target_classes, const PromptShape& shape,
                         Rng& init_rng) {
    const auto& mc = source.model.config();
    return PromptBundle{AffinityMatrix(target_classes, static_cast<std::size_t>(source.class_count())),
                        BottleneckPrompt(shape.tokens, shape.bottleneck, static_cast<std::size_t>(mc.embed_dim),
                                         static_cast<std::size_t>(mc.layers), shape.deep, init_rng)};
}

PromptEnsemble tune_ensemble(const SourceModel& source, const WorldSpec& world, std::span<const LabeledSequence> data,
                             const PromptShape& shape, const TrainConfig& config, const TuneOptions& options) {
    if (data.empty()) throw InvalidArgument("tune set is empty");
    PromptEnsemble out;
    const std::vector<int> row{0};
    for (std::size_t i = 0; i < data.size(); ++i) {
        TrainConfig member = config;
        member.seed = derive_seed(config.seed, i);
        Rng init = make_rng(member.seed, "prompt-init");
        PromptBundle b = make_bundle(source, 1, shape, init);
        tune(source, b, world, data.subspan(i, 1), row, member, options);
        out.members.push_back(std::move(b));
    }
    return out;
}

LabeledSequence augment(const LabeledSequence& seq, const WorldSpec& world, Rng& rng, double p) {
    // Draw first so the stream advances identically for every class.
    const bool flip = uniform01(rng) < p;
    if (!flip || !world.flip_preserves_class(seq.class_id)) return seq;
    LabeledSequence out = seq;
    out.tokens = flip_horizontal<int>(seq.tokens, world.grid_h(), world.grid_w());
    return out;
}

}  // namespace dpt
