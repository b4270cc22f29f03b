#include "dpt/world.hpp"

#include <algorithm>
#include <fstream>
#include "json.hpp"
#include <set>
#include <sstream>

#include "dpt/error.hpp"
#include "dpt/ini.hpp"

namespace dpt {

std::string to_string(Texture t) { return t == Texture::kSolid ? "solid" : "checker"; }

Texture parse_texture(const std::string& s) {
    if (s == "solid") return Texture::kSolid;
    if (s == "checker") return Texture::kChecker;
    throw InvalidArgument("unknown texture '" + s + "'");
}

int hamming(const Bitmap& a, const Bitmap& b) {
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

WorldSpec::WorldSpec(WorldParams params) : params_(std::move(params)) {
    validate();
    build_source_styles();
    Rng rng = make_rng(params_.seed, "bitmaps");
    const int n = token_count();
    std::bernoulli_distribution bit(0.5);
    constexpr int kMaxAttempts = 100000;
    int attempts = 0;
    while (static_cast<int>(bitmaps_.size()) < params_.class_count) {
        if (++attempts > kMaxAttempts) {
            throw InvalidArgument("could not place " + std::to_string(params_.class_count) +
                                  " class bitmaps at Hamming distance " + std::to_string(params_.min_hamming));
        }
        Bitmap b(static_cast<std::size_t>(n));
        for (auto& v : b) v = bit(rng) ? 1 : 0;
        // Keep at least two cells of each kind so both palettes show up, and
        // foreground on both checker parities so the textures differ.
        const int ones = static_cast<int>(std::count(b.begin(), b.end(), 1));
        if (ones < 2 || ones > n - 2) continue;
        bool parity[2] = {false, false};
        for (int i = 0; i < n; ++i) {
            if (b[static_cast<std::size_t>(i)]) parity[(i / grid_w() + i % grid_w()) % 2] = true;
        }
        if (!parity[0] || !parity[1]) continue;
        const bool far = std::all_of(bitmaps_.begin(), bitmaps_.end(),
                                     [&](const Bitmap& o) { return hamming(b, o) >= params_.min_hamming; });
        if (far) bitmaps_.push_back(std::move(b));
    }
}

WorldSpec::WorldSpec(WorldParams params, std::vector<Bitmap> bitmaps)
    : params_(std::move(params)), bitmaps_(std::move(bitmaps)) {
    validate();
    build_source_styles();
    if (static_cast<int>(bitmaps_.size()) != params_.class_count) {
        throw InvalidArgument("expected " + std::to_string(params_.class_count) + " bitmaps, got " +
                              std::to_string(bitmaps_.size()));
    }
    for (const auto& b : bitmaps_) {
        if (static_cast<int>(b.size()) != token_count()) throw InvalidArgument("bitmap size does not match grid");
    }
}

void WorldSpec::validate() const {
    if (params_.grid_h < 1 || params_.grid_w < 1) throw InvalidArgument("grid must be at least 1x1");
    if (params_.glyph_count < 2) throw InvalidArgument("need at least 2 glyphs");
    if (params_.palette_count < 2) throw InvalidArgument("need at least 2 palettes");
    if (params_.class_count < 1) throw InvalidArgument("need at least 1 class");
    if (params_.noise_rate < 0.0 || params_.noise_rate > 1.0) throw InvalidArgument("noise_rate must lie in [0, 1]");
    for (const auto& d : params_.domains) {
        if (d.fg_palette == d.bg_palette) throw InvalidArgument("domain rule needs fg_palette != bg_palette");
        if (d.fg_palette < 0 || d.fg_palette >= params_.palette_count || d.bg_palette < 0 ||
            d.bg_palette >= params_.palette_count) {
            throw InvalidArgument("domain palette out of range");
        }
    }
    if (params_.domains.empty()) throw InvalidArgument("need at least the source domain");
    for (std::size_t a = 0; a < params_.domains.size(); ++a) {
        for (std::size_t b = a + 1; b < params_.domains.size(); ++b) {
            if (params_.domains[a] == params_.domains[b]) {
                throw InvalidArgument("domains " + std::to_string(a) + " and " + std::to_string(b) + " share a rule");
            }
        }
    }
}

void WorldSpec::build_source_styles() {
    source_styles_ = {params_.domains.front()};
    if (!params_.diverse_source) return;
    for (Texture t : {Texture::kSolid, Texture::kChecker}) {
        for (int f = 0; f < params_.palette_count; ++f) {
            for (int b = 0; b < params_.palette_count; ++b) {
                const DomainRule r{f, b, t};
                if (f == b || std::find(params_.domains.begin(), params_.domains.end(), r) != params_.domains.end()) {
                    continue;
                }
                source_styles_.push_back(r);
            }
        }
    }
}

const Bitmap& WorldSpec::bitmap(int class_id) const {
    if (class_id < 0 || class_id >= class_count()) throw InvalidArgument("unknown class " + std::to_string(class_id));
    return bitmaps_[static_cast<std::size_t>(class_id)];
}

const DomainRule& WorldSpec::domain(int domain_id) const {
    if (domain_id < 0 || domain_id >= domain_count()) {
        throw InvalidArgument("unknown domain " + std::to_string(domain_id));
    }
    return params_.domains[static_cast<std::size_t>(domain_id)];
}

std::span<const DomainRule> WorldSpec::styles(int domain_id) const {
    if (domain_id == 0) return source_styles_;
    return {&domain(domain_id), 1};
}

int WorldSpec::add_domain(const DomainRule& rule) {
    if (std::find(source_styles_.begin(), source_styles_.end(), rule) != source_styles_.end()) {
        throw InvalidArgument("rule already belongs to the source domain");
    }
    params_.domains.push_back(rule);
    try {
        validate();
    } catch (...) {
        params_.domains.pop_back();
        throw;
    }
    return domain_count() - 1;
}

int WorldSpec::encode(int glyph, int palette) const {
    if (glyph < 0 || glyph >= params_.glyph_count || palette < 0 || palette >= params_.palette_count) {
        throw InvalidArgument("glyph/palette out of range");
    }
    return glyph * params_.palette_count + palette;
}

int WorldSpec::expected_palette(const DomainRule& rule, bool foreground, int row, int col) const {
    if (!foreground) return rule.bg_palette;
    if (rule.texture == Texture::kChecker && (row + col) % 2 == 1) return rule.bg_palette;
    return rule.fg_palette;
}

LabeledSequence WorldSpec::generate(int class_id, int domain_id, Rng& rng) const {
    return generate(class_id, domain_id, rng, params_.noise_rate);
}

LabeledSequence WorldSpec::generate(int class_id, int domain_id, Rng& rng, double noise_rate) const {
    const Bitmap& bits = bitmap(class_id);
    const auto rules = styles(domain_id);
    std::size_t pick = 0;
    if (rules.size() > 1) pick = std::uniform_int_distribution<std::size_t>(0, rules.size() - 1)(rng);
    const DomainRule& rule = rules[pick];
    std::uniform_int_distribution<int> any_palette(0, params_.palette_count - 1);
    LabeledSequence out;
    out.class_id = class_id;
    out.domain_id = domain_id;
    out.tokens.resize(static_cast<std::size_t>(token_count()));
    for (int r = 0; r < grid_h(); ++r) {
        for (int c = 0; c < grid_w(); ++c) {
            const int i = r * grid_w() + c;
            const bool fg = bits[static_cast<std::size_t>(i)] != 0;
            const int glyph = fg ? fg_glyph(class_id) : kBackgroundGlyph;
            int palette = expected_palette(rule, fg, r, c);
            if (uniform01(rng) < noise_rate) palette = any_palette(rng);
            out.tokens[static_cast<std::size_t>(i)] = encode(glyph, palette);
        }
    }
    return out;
}

OracleResult WorldSpec::oracle_classify(std::span<const int> tokens) const {
    if (static_cast<int>(tokens.size()) != token_count()) {
        throw InvalidArgument("oracle expects " + std::to_string(token_count()) + " tokens, got " +
                              std::to_string(tokens.size()));
    }
    Bitmap bits(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == mask_id()) throw InvalidArgument("oracle input contains MASK at position " + std::to_string(i));
        if (tokens[i] < 0 || tokens[i] > mask_id()) throw InvalidArgument("token id out of range");
        bits[i] = glyph_of(tokens[i]) != kBackgroundGlyph ? 1 : 0;
    }
    OracleResult res;
    int best = token_count() + 1, second = token_count() + 1;
    for (int c = 0; c < class_count(); ++c) {
        const int d = hamming(bits, bitmaps_[static_cast<std::size_t>(c)]);
        if (d < best) {
            second = best;
            best = d;
            res.class_id = c;
        } else if (d < second) {
            second = d;
        }
    }
    res.class_margin = class_count() > 1 ? second - best : token_count() - best;

    // A domain scores as its best-matching style.
    int best_score = -1, second_score = -1;
    for (int d = 0; d < domain_count(); ++d) {
        int score = -1;
        for (const DomainRule& rule : styles(d)) {
            int s = 0;
            for (int r = 0; r < grid_h(); ++r) {
                for (int c = 0; c < grid_w(); ++c) {
                    const int i = r * grid_w() + c;
                    s += palette_of(tokens[static_cast<std::size_t>(i)]) ==
                         expected_palette(rule, bits[static_cast<std::size_t>(i)] != 0, r, c);
                }
            }
            score = std::max(score, s);
        }
        if (score > best_score) {
            second_score = best_score;
            best_score = score;
            res.domain_id = d;
        } else if (score > second_score) {
            second_score = score;
        }
    }
    res.domain_margin = domain_count() > 1 ? best_score - second_score : best_score;
    return res;
}

bool WorldSpec::flip_preserves_class(int class_id) const {
    const Bitmap& b = bitmap(class_id);
    Bitmap flipped = flip_horizontal<std::uint8_t>(b, grid_h(), grid_w());
    TokenSequence tokens(flipped.size());
    for (std::size_t i = 0; i < flipped.size(); ++i) {
        tokens[i] = encode(flipped[i] ? fg_glyph(class_id) : kBackgroundGlyph, 0);
    }
    return oracle_classify(tokens).class_id == class_id;
}

void WorldSpec::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write world snapshot " + path.string());
    out << "[world]\n"
        << "grid_h = " << params_.grid_h << "\n"
        << "grid_w = " << params_.grid_w << "\n"
        << "glyph_count = " << params_.glyph_count << "\n"
        << "palette_count = " << params_.palette_count << "\n"
        << "class_count = " << params_.class_count << "\n"
        << "noise_rate = " << format_double(params_.noise_rate) << "\n"
        << "seed = " << params_.seed << "\n"
        << "min_hamming = " << params_.min_hamming << "\n"
        << "diverse_source = " << (params_.diverse_source ? "true" : "false") << "\n"
        << "\n[domains]\n";
    for (std::size_t d = 0; d < params_.domains.size(); ++d) {
        const auto& r = params_.domains[d];
        out << d << " = " << r.fg_palette << ", " << r.bg_palette << ", " << to_string(r.texture) << "\n";
    }
    out << "\n[bitmaps]\n";
    for (std::size_t c = 0; c < bitmaps_.size(); ++c) {
        out << c << " = ";
        for (auto v : bitmaps_[c]) out << static_cast<int>(v);
        out << "\n";
    }
    if (!out) throw IoError("failed writing world snapshot " + path.string());
}

WorldSpec WorldSpec::load(const std::filesystem::path& path) {
    const IniDocument doc = IniDocument::parse_file(path);
    doc.require_sections({"world", "domains", "bitmaps"});
    doc.require_keys("world", {"grid_h", "grid_w", "glyph_count", "palette_count", "class_count", "noise_rate",
                               "seed", "min_hamming", "diverse_source"});
    WorldParams p;
    p.grid_h = static_cast<int>(doc.get_int("world", "grid_h"));
    p.grid_w = static_cast<int>(doc.get_int("world", "grid_w"));
    p.glyph_count = static_cast<int>(doc.get_int("world", "glyph_count"));
    p.palette_count = static_cast<int>(doc.get_int("world", "palette_count"));
    p.class_count = static_cast<int>(doc.get_int("world", "class_count"));
    p.noise_rate = doc.get_double("world", "noise_rate");
    p.seed = static_cast<std::uint64_t>(doc.get_int("world", "seed"));
    p.min_hamming = static_cast<int>(doc.get_int("world", "min_hamming"));
    p.diverse_source = doc.get_bool("world", "diverse_source");
    p.domains.clear();
    for (std::size_t d = 0; doc.has("domains", std::to_string(d)); ++d) {
        std::istringstream is(doc.get_string("domains", std::to_string(d)));
        DomainRule rule;
        std::string texture;
        char comma = 0;
        if (!(is >> rule.fg_palette >> comma >> rule.bg_palette >> comma >> texture)) {
            throw ConfigError(path.string() + ": malformed domains." + std::to_string(d));
        }
        rule.texture = parse_texture(texture);
        p.domains.push_back(rule);
    }
    std::vector<Bitmap> bitmaps;
    for (int c = 0; c < p.class_count; ++c) {
        const std::string s = doc.get_string("bitmaps", std::to_string(c));
        Bitmap b;
        for (char ch : s) {
            if (ch != '0' && ch != '1') throw ConfigError(path.string() + ": malformed bitmaps." + std::to_string(c));
            b.push_back(ch == '1' ? 1 : 0);
        }
        bitmaps.push_back(std::move(b));
    }
    return WorldSpec(std::move(p), std::move(bitmaps));
}

DatasetSplits make_splits(const WorldSpec& world, const SplitProtocol& protocol, std::uint64_t seed) {
    world.domain(protocol.source_domain);
    world.domain(protocol.target_domain);
    if (protocol.seen_classes.empty()) throw InvalidArgument("protocol needs at least one seen class");
    std::set<int> seen_set;
    for (int c : protocol.seen_classes) {
        world.bitmap(c);
        if (!seen_set.insert(c).second) throw InvalidArgument("duplicate seen class " + std::to_string(c));
    }
    if (protocol.shots < 1 && protocol.tune_size < 1) throw InvalidArgument("protocol needs shots >= 1");
    if (protocol.pretrain_size < 0 || protocol.reference_per_class < 0) {
        throw InvalidArgument("split sizes must be non-negative");
    }

    DatasetSplits splits;
    Rng pre_rng = make_rng(seed, "pretrain");
    std::uniform_int_distribution<int> any_class(0, world.class_count() - 1);
    splits.pretrain.reserve(static_cast<std::size_t>(protocol.pretrain_size));
    for (int i = 0; i < protocol.pretrain_size; ++i) {
        splits.pretrain.push_back(world.generate(any_class(pre_rng), protocol.source_domain, pre_rng));
    }

    // Tune set: class of each item, then unique draws per class.
    std::vector<int> tune_classes;
    const int seen = static_cast<int>(protocol.seen_classes.size());
    const int total = protocol.tune_size > 0 ? protocol.tune_size : protocol.shots * seen;
    for (int i = 0; i < total; ++i) tune_classes.push_back(protocol.seen_classes[static_cast<std::size_t>(i % seen)]);
    const int per_class = (total + seen - 1) / seen;
    if (world.params().noise_rate == 0.0 && per_class > 1) {
        throw InvalidArgument("cannot draw " + std::to_string(per_class) +
                              " distinct sequences per class from a noise-free world");
    }
    Rng tune_rng = make_rng(seed, "tune");
    std::set<TokenSequence> used;
    constexpr int kMaxDraws = 1000;
    for (int i = 0; i < total; ++i) {
        const int c = tune_classes[static_cast<std::size_t>(i)];
        bool placed = false;
        for (int attempt = 0; attempt < kMaxDraws && !placed; ++attempt) {
            LabeledSequence s = world.generate(c, protocol.target_domain, tune_rng);
            if (used.insert(s.tokens).second) {
                splits.tune.push_back(std::move(s));
                placed = true;
            }
        }
        if (!placed) {
            throw InvalidArgument("could not draw " + std::to_string(per_class) + " distinct tune sequences for class " +
                                  std::to_string(c));
        }
    }
    if (protocol.per_image_class) {
        for (int i = 0; i < total; ++i) {
            splits.tune_targets.push_back(i);
            splits.target_classes.push_back(tune_classes[static_cast<std::size_t>(i)]);
        }
    } else {
        splits.target_classes = protocol.seen_classes;
        for (int c : tune_classes) {
            const auto it = std::find(protocol.seen_classes.begin(), protocol.seen_classes.end(), c);
            splits.tune_targets.push_back(static_cast<int>(it - protocol.seen_classes.begin()));
        }
    }

    for (int c = 0; c < world.class_count(); ++c) {
        if (!seen_set.count(c)) splits.zero_shot_classes.push_back(c);
    }

    Rng ref_rng = make_rng(seed, "reference");
    for (int c = 0; c < world.class_count(); ++c) {
        for (int i = 0; i < protocol.reference_per_class; ++i) {
            LabeledSequence s = world.generate(c, protocol.target_domain, ref_rng);
            // Redraw on a verbatim collision with the tune set.
            for (int attempt = 0; used.count(s.tokens) && attempt < kMaxDraws; ++attempt) {
                s = world.generate(c, protocol.target_domain, ref_rng);
            }
            if (used.count(s.tokens)) continue;
            splits.reference.push_back(std::move(s));
        }
    }
    return splits;
}

std::vector<LabeledSequence> filter_classes(std::span<const LabeledSequence> data, std::span<const int> classes) {
    std::vector<LabeledSequence> out;
    for (const auto& s : data) {
        if (std::find(classes.begin(), classes.end(), s.class_id) != classes.end()) out.push_back(s);
    }
    return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const LabeledSequence> data) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset " + path.string());
    for (const auto& s : data) {
        nlohmann::ordered_json j;
        j["tokens"] = s.tokens;
        j["class"] = s.class_id;
        j["domain"] = s.domain_id;
        if (s.synth) {
            j["prompt"] = s.synth->prompt_id;
            j["lambda"] = s.synth->guidance;
            j["seed"] = s.synth->seed;
        }
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing dataset " + path.string());
}

std::vector<LabeledSequence> read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path.string());
    std::vector<LabeledSequence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            LabeledSequence s;
            s.tokens = j.at("tokens").get<TokenSequence>();
            s.class_id = j.at("class").get<int>();
            s.domain_id = j.at("domain").get<int>();
            if (j.contains("prompt")) {
                s.synth = SynthTag{j.at("prompt").get<int>(), j.at("lambda").get<double>(),
                                   j.at("seed").get<std::uint64_t>()};
            }
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_ppm(const std::filesystem::path& path, const WorldSpec& world, std::span<const int> tokens, int cell_px) {
    static constexpr unsigned char kPalette[8][3] = {{230, 57, 70},  {241, 250, 238}, {69, 123, 157}, {29, 53, 87},
                                                     {244, 162, 97}, {42, 157, 143},  {233, 196, 106}, {38, 70, 83}};
    const int w = world.grid_w() * cell_px, h = world.grid_h() * cell_px;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int id = tokens[static_cast<std::size_t>((y / cell_px) * world.grid_w() + x / cell_px)];
            unsigned char px[3] = {128, 128, 128};
            if (id != world.mask_id()) {
                const int glyph = world.glyph_of(id);
                const auto* base = kPalette[world.palette_of(id) % 8];
                const int u = x % cell_px, v = y % cell_px;
                // Glyphs: 0 plain, 1 diagonal, 2 cross, 3 centre dot; others plain.
                bool ink = false;
                if (glyph == 1) ink = u == v;
                if (glyph == 2) ink = u == cell_px / 2 || v == cell_px / 2;
                if (glyph == 3) ink = std::abs(u - cell_px / 2) <= 1 && std::abs(v - cell_px / 2) <= 1;
                for (int k = 0; k < 3; ++k) px[k] = ink ? static_cast<unsigned char>(base[k] / 3) : base[k];
            }
            out.write(reinterpret_cast<const char*>(px), 3);
        }
    }
}

}  // namespace dpt
