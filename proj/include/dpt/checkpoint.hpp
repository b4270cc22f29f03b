#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpt/model.hpp"
#include "dpt/prompt.hpp"

namespace dpt {

// File layout: "DPT1", u64 little-endian header length, JSON header
// {version, names, shapes, seed, config_hash}, then every tensor as
// little-endian float64 in header order.
struct CheckpointHeader {
    int version = 1;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::uint64_t seed = 0;
    std::string config_hash;
};

struct Checkpoint {
    CheckpointHeader header;
    std::vector<NamedTensor> tensors;

    // Throws MissingArtifact when absent.
    const Tensor& get(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, std::uint64_t seed,
                     const std::string& config_hash);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into existing tensors by name; shapes must match.
void restore(const Checkpoint& checkpoint, const std::vector<NamedTensor>& targets);

// Prompt sets: member i's tensors are stored as "member<i>.<name>".
void save_prompts(const std::filesystem::path& path, const PromptEnsemble& prompts, std::uint64_t seed,
                  const std::string& config_hash);
// Restores into `like`, whose member count and shapes must match the file.
void restore_prompts(const Checkpoint& checkpoint, PromptEnsemble& like);

}  // namespace dpt
