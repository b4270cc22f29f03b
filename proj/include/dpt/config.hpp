#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpt/decoding.hpp"
#include "dpt/evaluation.hpp"
#include "dpt/model.hpp"
#include "dpt/training.hpp"
#include "dpt/world.hpp"

namespace dpt {

enum class PromptMode { kSingle, kEnsemble };

struct ProtocolConfig {
    int source_domain = 0;
    int target_domain = 1;
    std::vector<int> seen_classes = {0, 1, 2};
    int shots = 1;
    int tune_size = 5;
    PromptMode mode = PromptMode::kSingle;
    AttentionControl control = AttentionControl::kOn;
    int bottleneck = 4;
    int prompt_tokens = 1;
    bool deep_prompt = true;
    int pretrain_size = 20000;
    int reference_per_class = 200;
    int samples_per_class = 200;
    // Ablation grids.
    std::vector<double> lambda_grid = {0.0, 0.5, 1.0, 2.0, 3.0, 5.0};
    std::vector<int> bottleneck_grid = {1, 2, 4, 8, 16, 32};
};

struct RunConfig {
    std::uint64_t seed = 0;
    WorldParams world;
    ModelConfig model;
    TrainConfig pretrain{20000, 64, 0.001, 0};
    TrainConfig tune{1000, 16, 0.001, 0};
    TuneOptions tune_options;
    DecodeConfig decode = default_decode();
    ProtocolConfig protocol;
    ZsdaOptions zsda;
    // Synthesized sequences per class for the classifier experiment.
    int zsda_synth_per_class = 200;
    int zsda_source_per_class = 200;

    static DecodeConfig default_decode() {
        DecodeConfig d;
        d.guidance = 2.0;
        return d;
    }

    RunConfig() { apply_seed(0); }
    // Sets the run seed and the per-stage streams derived from it.
    void apply_seed(std::uint64_t s);

    // Sequence length and codebook follow the world.
    ModelConfig resolved_model() const;
    SplitProtocol split_protocol() const;
};

// Unknown sections or keys, malformed values and out-of-range settings are
// ConfigErrors naming the offending key. Missing keys keep their defaults.
RunConfig parse_run_config(const std::string& text, const std::string& source_name = "<string>");
RunConfig load_run_config(const std::filesystem::path& path);
std::string to_ini(const RunConfig& config);

// Artifact kinds. A hash covers every key the artifact depends on:
// source data (world, source side of the protocol, seed), target data (plus
// the target side), pretrain (source data plus model and pretraining), tune
// (pretrain plus target data, prompt and tuning) and synth (tune plus
// decoding).
enum class Stage { kSourceData, kTargetData, kPretrain, kTune, kSynth };

std::uint64_t fnv1a64(const std::string& text);
std::string stage_hash(const RunConfig& config, Stage stage);

}  // namespace dpt
