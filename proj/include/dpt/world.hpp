#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpt/rng.hpp"

namespace dpt {

using TokenSequence = std::vector<int>;
using Bitmap = std::vector<std::uint8_t>;

enum class Texture { kSolid, kChecker };

std::string to_string(Texture t);
Texture parse_texture(const std::string& s);

// Palette assignment of one domain ("style"). Checker alternates the fg and
// bg palettes over foreground cells by (row + col) parity.
struct DomainRule {
    int fg_palette = 0;
    int bg_palette = 1;
    Texture texture = Texture::kSolid;

    bool operator==(const DomainRule&) const = default;
};

struct WorldParams {
    int grid_h = 4;
    int grid_w = 4;
    int glyph_count = 4;
    int palette_count = 4;
    int class_count = 10;
    double noise_rate = 0.02;
    std::uint64_t seed = 7;
    int min_hamming = 6;
    // Domain 0 covers every valid rule not claimed by another domain at
    // construction, drawn uniformly per sequence. Off: domain 0 is its own
    // rule only.
    bool diverse_source = true;
    // Source domain first, then the target domains.
    std::vector<DomainRule> domains = {
        {0, 1, Texture::kSolid},
        {2, 3, Texture::kSolid},
        {3, 2, Texture::kChecker},
    };
};

// Synthesis provenance attached to generated records.
struct SynthTag {
    int prompt_id = -1;
    double guidance = 0.0;
    std::uint64_t seed = 0;
};

struct LabeledSequence {
    TokenSequence tokens;
    int class_id = 0;
    int domain_id = 0;
    std::optional<SynthTag> synth;
};

struct OracleResult {
    int class_id = 0;
    int domain_id = 0;
    int class_margin = 0;
    int domain_margin = 0;
};

/// The synthetic token world: glyph bitmaps per class, palette rules per
/// domain, and the deterministic decoder that labels any sequence.
///
/// Token ids encode (glyph, palette) as glyph * palette_count + palette.
/// Background cells carry glyph 0; class c draws its foreground cells with
/// glyph 1 + c mod (glyph_count - 1).
class WorldSpec {
public:
    static constexpr int kBackgroundGlyph = 0;

    // Rejection-samples class bitmaps with pairwise Hamming distance at
    // least `min_hamming`.
    explicit WorldSpec(WorldParams params);
    // Rebuilds a world from explicit bitmaps (used when loading snapshots).
    WorldSpec(WorldParams params, std::vector<Bitmap> bitmaps);

    const WorldParams& params() const { return params_; }
    int grid_h() const { return params_.grid_h; }
    int grid_w() const { return params_.grid_w; }
    int token_count() const { return params_.grid_h * params_.grid_w; }
    int vocab_size() const { return params_.glyph_count * params_.palette_count; }
    int mask_id() const { return vocab_size(); }
    int class_count() const { return params_.class_count; }
    int domain_count() const { return static_cast<int>(params_.domains.size()); }

    const Bitmap& bitmap(int class_id) const;
    const std::vector<Bitmap>& bitmaps() const { return bitmaps_; }
    // Primary rule of a domain (the first style of the source family).
    const DomainRule& domain(int domain_id) const;
    // Every rule that generates the domain.
    std::span<const DomainRule> styles(int domain_id) const;
    // Registers an additional rule; the oracle considers it from then on.
    // Rules already owned by a domain are rejected.
    int add_domain(const DomainRule& rule);

    int encode(int glyph, int palette) const;
    int glyph_of(int id) const { return id / params_.palette_count; }
    int palette_of(int id) const { return id % params_.palette_count; }
    int fg_glyph(int class_id) const { return 1 + class_id % (params_.glyph_count - 1); }

    // Palette a rule assigns to a cell.
    int expected_palette(const DomainRule& rule, bool foreground, int row, int col) const;

    LabeledSequence generate(int class_id, int domain_id, Rng& rng) const;
    // Same as generate with the noise rate overridden.
    LabeledSequence generate(int class_id, int domain_id, Rng& rng, double noise_rate) const;

    OracleResult oracle_classify(std::span<const int> tokens) const;

    // Whether the horizontally mirrored bitmap still decodes to its class.
    bool flip_preserves_class(int class_id) const;

    void save(const std::filesystem::path& path) const;
    static WorldSpec load(const std::filesystem::path& path);

private:
    void validate() const;
    void build_source_styles();

    WorldParams params_;
    std::vector<Bitmap> bitmaps_;
    std::vector<DomainRule> source_styles_;
};

int hamming(const Bitmap& a, const Bitmap& b);

// Mirrors a row-major h x w grid left-to-right.
template <class T>
std::vector<T> flip_horizontal(std::span<const T> grid, int h, int w) {
    std::vector<T> out(grid.size());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out[r * w + c] = grid[r * w + (w - 1 - c)];
    return out;
}

struct SplitProtocol {
    int source_domain = 0;
    int target_domain = 1;
    std::vector<int> seen_classes = {0, 1, 2};
    // Per seen class. When tune_size > 0 it overrides shots: classes are
    // assigned round-robin until tune_size sequences exist.
    int shots = 1;
    int tune_size = 0;
    // Give every tune sequence its own target class.
    bool per_image_class = false;
    int pretrain_size = 20000;
    int reference_per_class = 200;
};

struct DatasetSplits {
    std::vector<LabeledSequence> pretrain;
    std::vector<LabeledSequence> tune;
    // Target-class index of each tune sequence (row of the affinity matrix).
    std::vector<int> tune_targets;
    // Source class behind every target-class row.
    std::vector<int> target_classes;
    std::vector<int> zero_shot_classes;
    // Real target-domain sequences for every source class, disjoint from tune.
    std::vector<LabeledSequence> reference;
};

DatasetSplits make_splits(const WorldSpec& world, const SplitProtocol& protocol, std::uint64_t seed);

std::vector<LabeledSequence> filter_classes(std::span<const LabeledSequence> data, std::span<const int> classes);

// One JSON object per line: {"tokens":[...],"class":c,"domain":d} plus
// "prompt","lambda","seed" for synthesized records.
void write_dataset(const std::filesystem::path& path, std::span<const LabeledSequence> data);
std::vector<LabeledSequence> read_dataset(const std::filesystem::path& path);

// Debug rendering of a token grid as a binary PPM.
void write_ppm(const std::filesystem::path& path, const WorldSpec& world, std::span<const int> tokens,
               int cell_px = 8);

}  // namespace dpt
