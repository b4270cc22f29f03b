#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpt/decoding.hpp"
#include "dpt/prompt.hpp"
#include "dpt/world.hpp"

namespace dpt {

using FeatureVector = std::vector<double>;

// Per-position glyph one-hots (N * G), per-position palette one-hots (N * P)
// and the glyph-palette co-occurrence histogram (G * P, divided by N).
FeatureVector features(const WorldSpec& world, std::span<const int> tokens);
std::size_t feature_dim(const WorldSpec& world);

// Frechet distance between Gaussians fitted to two feature sets:
// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
// Sets smaller than twice the dimension get 1e-6 added to the covariance
// diagonals.
double frechet_distance(std::span<const FeatureVector> a, std::span<const FeatureVector> b);

struct OracleScore {
    std::size_t samples = 0;
    double class_accuracy = 0.0;
    double domain_accuracy = 0.0;
};

// Fraction of sequences the oracle assigns to `class_id` and `domain_id`.
OracleScore oracle_score(const WorldSpec& world, std::span<const LabeledSequence> data, int class_id, int domain_id);

struct AttentionUsage {
    double class_mass = 0.0;
    double prompt_mass = 0.0;
    // Share of (layer, head, query) cells where the class weight is at
    // least every single prompt weight.
    double class_dominant_share = 0.0;
    std::size_t cells = 0;
};

// Mean post-softmax attention on the class and prompt slots over every
// layer, head and query of one forward pass.
AttentionUsage attention_utilization(const Transformer& model, const PrefixSlots& prefix,
                                     std::span<const TokenSequence> probe, AttentionControl mode);

struct EvalRow {
    std::string arm;  // "source", "in_dist", "zero_shot", "zero_shot_ensemble"
    int class_id = 0;
    int domain_id = 0;
    OracleScore score;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::optional<double> frechet_source;
    std::optional<double> frechet_in_dist;
    std::optional<double> frechet_zero_shot;
    std::optional<double> frechet_zero_shot_ensemble;
    AttentionUsage attention;
    std::string config_hash;

    // Sample-weighted means over the rows of one arm.
    OracleScore arm_mean(const std::string& arm) const;

    std::string to_json() const;
    std::string to_tsv() const;
};

struct EvalOptions {
    int samples_per_class = 200;
    DecodeConfig decode;
    AttentionControl control = AttentionControl::kOn;
    int target_domain = 1;
    int source_domain = 0;
};

/// Everything a compositional evaluation reads.
struct EvalInputs {
    const WorldSpec* world = nullptr;
    const SourceModel* source = nullptr;
    const DatasetSplits* splits = nullptr;
    // Single tuned prompt (one member) and, optionally, a per-image ensemble.
    const PromptEnsemble* single = nullptr;
    const PromptEnsemble* ensemble = nullptr;
};

// Synthesizes every zero-shot class with the source model and with the
// tuned prompt(s), every tuned target class in distribution, oracle-scores
// the samples and computes Frechet distances to the real target reference.
EvalReport compositional_eval(const EvalInputs& inputs, const EvalOptions& options);

struct ZsdaOptions {
    int steps = 2000;
    int batch = 64;
    double lr = 0.01;
    // Probability that a training example of the mixed arm is synthesized.
    double synth_ratio = 0.75;
    std::uint64_t seed = 0;
};

struct ZsdaResult {
    double source_only = 0.0;
    double source_plus_synth = 0.0;
};

// Zero-shot synthesis of `per_class` sequences for every source class,
// labeled with the requested class and `domain_label`.
std::vector<LabeledSequence> synthesize_all_classes(const SourceModel& source, const PromptEnsemble& prompts,
                                                    int per_class, int domain_label, AttentionControl control,
                                                    const DecodeConfig& decode);

// Multinomial logistic regression on features, trained once on source data
// and once on the source/synth mixture with identical hyperparameters and
// seeds, both tested on real target-domain sequences.
ZsdaResult zsda_experiment(const WorldSpec& world, std::span<const LabeledSequence> source_real,
                           std::span<const LabeledSequence> synth, std::span<const LabeledSequence> target_test,
                           const ZsdaOptions& options);

// Classifier accuracy helper exposed for tests: trains on `train` (drawn
// from `mixture` with probability `ratio` per example) and tests on `test`.
double train_and_test_classifier(const std::vector<FeatureVector>& train_x, const std::vector<int>& train_y,
                                 const std::vector<FeatureVector>& mix_x, const std::vector<int>& mix_y, double ratio,
                                 const std::vector<FeatureVector>& test_x, const std::vector<int>& test_y,
                                 int class_count, const ZsdaOptions& options);

}  // namespace dpt
