#include "dpt/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "dpt/error.hpp"
#include "dpt/ini.hpp"

namespace dpt {
namespace {

enum Group { kSource = 1, kTarget = 2, kModel = 4, kPretrainGroup = 8, kPrompt = 16, kDecode = 32, kOther = 64 };

struct Field {
    const char* section;
    const char* key;
    int group;
    std::function<std::string(const RunConfig&)> emit;
    std::function<void(RunConfig&, const IniDocument&, const std::string&, const std::string&)> read;
};

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ", ";
        if constexpr (std::is_floating_point_v<T>) {
            out += format_double(v[i]);
        } else {
            out += std::to_string(v[i]);
        }
    }
    return out;
}

std::string str(bool b) { return b ? "true" : "false"; }
std::string str(double d) { return format_double(d); }
std::string str(int i) { return std::to_string(i); }
std::string str(std::uint64_t u) { return std::to_string(u); }

std::vector<int> ints(const IniDocument& d, const std::string& s, const std::string& k) {
    std::vector<int> out;
    for (auto v : d.get_ints(s, k)) out.push_back(static_cast<int>(v));
    return out;
}

#define INT_FIELD(sec, name, grp, expr)                                                                        \
    Field {                                                                                                    \
        sec, name, grp, [](const RunConfig& c) { return str(static_cast<int>(c.expr)); },                      \
            [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {               \
                c.expr = static_cast<decltype(c.expr)>(d.get_int(s, k));                                       \
            }                                                                                                  \
    }
#define DOUBLE_FIELD(sec, name, grp, expr)                                                                     \
    Field {                                                                                                    \
        sec, name, grp, [](const RunConfig& c) { return str(c.expr); },                                        \
            [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {               \
                c.expr = d.get_double(s, k);                                                                   \
            }                                                                                                  \
    }
#define BOOL_FIELD(sec, name, grp, expr)                                                                       \
    Field {                                                                                                    \
        sec, name, grp, [](const RunConfig& c) { return str(c.expr); },                                        \
            [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {               \
                c.expr = d.get_bool(s, k);                                                                     \
            }                                                                                                  \
    }
#define U64_FIELD(sec, name, grp, expr)                                                                        \
    Field {                                                                                                    \
        sec, name, grp, [](const RunConfig& c) { return str(static_cast<std::uint64_t>(c.expr)); },            \
            [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {               \
                const auto v = d.get_int(s, k);                                                                \
                if (v < 0) throw ConfigError(s + "." + k + " must be non-negative");                           \
                c.expr = static_cast<std::uint64_t>(v);                                                        \
            }                                                                                                  \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        U64_FIELD("run", "seed", kSource, seed),

        INT_FIELD("world", "grid_h", kSource, world.grid_h),
        INT_FIELD("world", "grid_w", kSource, world.grid_w),
        INT_FIELD("world", "glyph_count", kSource, world.glyph_count),
        INT_FIELD("world", "palette_count", kSource, world.palette_count),
        INT_FIELD("world", "class_count", kSource, world.class_count),
        DOUBLE_FIELD("world", "noise_rate", kSource, world.noise_rate),
        U64_FIELD("world", "seed", kSource, world.seed),
        INT_FIELD("world", "min_hamming", kSource, world.min_hamming),
        BOOL_FIELD("world", "diverse_source", kSource, world.diverse_source),

        INT_FIELD("model", "layers", kModel, model.layers),
        INT_FIELD("model", "embed_dim", kModel, model.embed_dim),
        INT_FIELD("model", "heads", kModel, model.heads),
        INT_FIELD("model", "ffn_dim", kModel, model.ffn_dim),

        INT_FIELD("pretrain", "steps", kPretrainGroup, pretrain.steps),
        INT_FIELD("pretrain", "batch", kPretrainGroup, pretrain.batch),
        DOUBLE_FIELD("pretrain", "lr", kPretrainGroup, pretrain.base_lr),

        INT_FIELD("tune", "steps", kPrompt, tune.steps),
        INT_FIELD("tune", "batch", kPrompt, tune.batch),
        DOUBLE_FIELD("tune", "lr", kPrompt, tune.base_lr),
        DOUBLE_FIELD("tune", "affinity_lr_scale", kPrompt, tune_options.affinity_lr_scale),
        DOUBLE_FIELD("tune", "flip_probability", kPrompt, tune_options.flip_probability),

        INT_FIELD("decode", "steps", kDecode, decode.steps),
        Field{"decode", "schedule", kDecode, [](const RunConfig& c) { return join(c.decode.schedule); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  c.decode.schedule = d.get_string(s, k).empty() ? std::vector<int>{} : ints(d, s, k);
              }},
        DOUBLE_FIELD("decode", "guidance", kDecode, decode.guidance),
        DOUBLE_FIELD("decode", "temperature", kDecode, decode.temperature),
        DOUBLE_FIELD("decode", "choice_temperature", kDecode, decode.choice_temperature),
        BOOL_FIELD("decode", "unconditional_drop_prompt", kDecode, decode.drop_prompt),

        INT_FIELD("protocol", "source_domain", kSource, protocol.source_domain),
        INT_FIELD("protocol", "pretrain_size", kSource, protocol.pretrain_size),
        INT_FIELD("protocol", "target_domain", kTarget, protocol.target_domain),
        Field{"protocol", "seen_classes", kTarget, [](const RunConfig& c) { return join(c.protocol.seen_classes); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  c.protocol.seen_classes = ints(d, s, k);
              }},
        INT_FIELD("protocol", "shots", kTarget, protocol.shots),
        INT_FIELD("protocol", "tune_size", kTarget, protocol.tune_size),
        INT_FIELD("protocol", "reference_per_class", kTarget, protocol.reference_per_class),
        Field{"protocol", "mode", kPrompt,
              [](const RunConfig& c) { return std::string(c.protocol.mode == PromptMode::kSingle ? "single" : "ensemble"); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  const std::string v = d.get_string(s, k);
                  if (v != "single" && v != "ensemble") throw ConfigError(s + "." + k + ": expected single|ensemble, got '" + v + "'");
                  c.protocol.mode = v == "single" ? PromptMode::kSingle : PromptMode::kEnsemble;
              }},
        Field{"protocol", "attention_control", kPrompt,
              [](const RunConfig& c) { return std::string(c.protocol.control == AttentionControl::kOn ? "on" : "off"); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  c.protocol.control = d.get_bool(s, k) ? AttentionControl::kOn : AttentionControl::kOff;
              }},
        INT_FIELD("protocol", "bottleneck", kPrompt, protocol.bottleneck),
        INT_FIELD("protocol", "prompt_tokens", kPrompt, protocol.prompt_tokens),
        BOOL_FIELD("protocol", "deep_prompt", kPrompt, protocol.deep_prompt),
        INT_FIELD("protocol", "samples_per_class", kDecode, protocol.samples_per_class),
        Field{"protocol", "lambda_grid", kOther, [](const RunConfig& c) { return join(c.protocol.lambda_grid); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  c.protocol.lambda_grid = d.get_doubles(s, k);
              }},
        Field{"protocol", "bottleneck_grid", kOther, [](const RunConfig& c) { return join(c.protocol.bottleneck_grid); },
              [](RunConfig& c, const IniDocument& d, const std::string& s, const std::string& k) {
                  c.protocol.bottleneck_grid = ints(d, s, k);
              }},

        INT_FIELD("zsda", "steps", kOther, zsda.steps),
        INT_FIELD("zsda", "batch", kOther, zsda.batch),
        DOUBLE_FIELD("zsda", "lr", kOther, zsda.lr),
        DOUBLE_FIELD("zsda", "synth_ratio", kOther, zsda.synth_ratio),
        INT_FIELD("zsda", "synth_per_class", kOther, zsda_synth_per_class),
        INT_FIELD("zsda", "source_per_class", kOther, zsda_source_per_class),
    };
    return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef U64_FIELD

const char* kSections[] = {"run", "world", "domains", "model", "pretrain", "tune", "decode", "protocol", "zsda"};

std::string domain_line(const DomainRule& r) {
    return std::to_string(r.fg_palette) + ", " + std::to_string(r.bg_palette) + ", " + to_string(r.texture);
}

// Canonical text of every field whose group is in `mask`.
std::string canonical(const RunConfig& c, int mask) {
    std::ostringstream os;
    for (const auto& f : fields()) {
        if (f.group & mask) os << f.section << '.' << f.key << '=' << f.emit(c) << '\n';
    }
    if (mask & kSource) {
        for (std::size_t d = 0; d < c.world.domains.size(); ++d) os << "domains." << d << '=' << domain_line(c.world.domains[d]) << '\n';
    }
    return os.str();
}

void check(const RunConfig& c, const std::string& where) {
    auto fail = [&](const std::string& m) { throw ConfigError(where + ": " + m); };
    try {
        (void)WorldSpec(c.world);
        c.resolved_model().validate();
        (void)c.decode.resolved_schedule(c.world.grid_h * c.world.grid_w);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        fail(e.what());
    }
    for (const auto* t : {&c.pretrain, &c.tune}) {
        if (t->steps < 1 || t->batch < 1 || !(t->base_lr > 0.0)) fail("training steps, batch and lr must be positive");
    }
    if (c.decode.guidance < 0.0) fail("decode.guidance must be >= 0");
    if (c.decode.temperature < 0.0 || c.decode.choice_temperature < 0.0) fail("decode temperatures must be >= 0");
    const int domains = static_cast<int>(c.world.domains.size());
    const auto& p = c.protocol;
    if (p.source_domain < 0 || p.source_domain >= domains || p.target_domain < 0 || p.target_domain >= domains) {
        fail("protocol domains must name entries of [domains]");
    }
    if (p.source_domain == p.target_domain) fail("protocol source and target domains must differ");
    if (p.bottleneck < 1 || p.prompt_tokens < 1) fail("protocol.bottleneck and prompt_tokens must be >= 1");
    if (p.samples_per_class < 0 || p.reference_per_class < 0 || p.pretrain_size < 1) fail("protocol sizes out of range");
    for (int b : p.bottleneck_grid) {
        if (b < 1) fail("protocol.bottleneck_grid entries must be >= 1");
    }
    for (double l : p.lambda_grid) {
        if (l < 0.0) fail("protocol.lambda_grid entries must be >= 0");
    }
    if (c.zsda.steps < 1 || c.zsda.batch < 1 || !(c.zsda.lr > 0.0)) fail("zsda steps, batch and lr must be positive");
    if (c.zsda.synth_ratio < 0.0 || c.zsda.synth_ratio > 1.0) fail("zsda.synth_ratio must lie in [0, 1]");
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    pretrain.seed = derive_seed(s, "pretrain");
    tune.seed = derive_seed(s, "tune");
    decode.seed = derive_seed(s, "decode");
    zsda.seed = derive_seed(s, "zsda");
}

ModelConfig RunConfig::resolved_model() const {
    ModelConfig m = model;
    m.token_count = world.grid_h * world.grid_w;
    m.vocab = world.glyph_count * world.palette_count;
    return m;
}

SplitProtocol RunConfig::split_protocol() const {
    SplitProtocol s;
    s.source_domain = protocol.source_domain;
    s.target_domain = protocol.target_domain;
    s.seen_classes = protocol.seen_classes;
    s.shots = protocol.shots;
    s.tune_size = protocol.tune_size;
    s.pretrain_size = protocol.pretrain_size;
    s.reference_per_class = protocol.reference_per_class;
    return s;
}

RunConfig parse_run_config(const std::string& text, const std::string& source_name) {
    const IniDocument doc = IniDocument::parse_string(text, source_name);
    const std::set<std::string> known_sections(std::begin(kSections), std::end(kSections));
    for (const auto& s : doc.sections()) {
        if (!known_sections.count(s)) throw ConfigError(source_name + ": unknown section [" + s + "]");
    }
    RunConfig c;
    for (const auto& s : doc.sections()) {
        if (s == "domains") continue;
        for (const auto& k : doc.keys(s)) {
            bool known = false;
            for (const auto& f : fields()) known |= s == f.section && k == f.key;
            if (!known) throw ConfigError(source_name + ": unknown key " + s + "." + k);
        }
    }
    for (const auto& f : fields()) {
        if (doc.has(f.section, f.key)) f.read(c, doc, f.section, f.key);
    }
    if (doc.has_section("domains")) {
        const auto keys = doc.keys("domains");
        c.world.domains.clear();
        for (std::size_t d = 0; d < keys.size(); ++d) {
            const std::string key = std::to_string(d);
            if (!doc.has("domains", key)) throw ConfigError(source_name + ": domains must be numbered 0.." + std::to_string(keys.size() - 1));
            std::istringstream is(doc.get_string("domains", key));
            DomainRule r;
            std::string texture;
            char comma = 0, comma2 = 0;
            if (!(is >> r.fg_palette >> comma >> r.bg_palette >> comma2 >> texture) || comma != ',' || comma2 != ',') {
                throw ConfigError(source_name + ": domains." + key + ": expected 'fg, bg, solid|checker'");
            }
            try {
                r.texture = parse_texture(texture);
            } catch (const InvalidArgument& e) {
                throw ConfigError(source_name + ": domains." + key + ": " + e.what());
            }
            c.world.domains.push_back(r);
        }
    }
    c.apply_seed(c.seed);
    check(c, source_name);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), path.string());
}

std::string to_ini(const RunConfig& c) {
    std::ostringstream os;
    for (const char* section : kSections) {
        os << (std::string(section) == "run" ? "" : "\n") << '[' << section << "]\n";
        if (std::string(section) == "domains") {
            for (std::size_t d = 0; d < c.world.domains.size(); ++d) os << d << " = " << domain_line(c.world.domains[d]) << '\n';
            continue;
        }
        for (const auto& f : fields()) {
            if (section == std::string(f.section)) os << f.key << " = " << f.emit(c) << '\n';
        }
    }
    return os.str();
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string stage_hash(const RunConfig& config, Stage stage) {
    int mask = 0;
    switch (stage) {
        case Stage::kSourceData: mask = kSource; break;
        case Stage::kTargetData: mask = kSource | kTarget; break;
        case Stage::kPretrain: mask = kSource | kModel | kPretrainGroup; break;
        case Stage::kTune: mask = kSource | kTarget | kModel | kPretrainGroup | kPrompt; break;
        case Stage::kSynth: mask = kSource | kTarget | kModel | kPretrainGroup | kPrompt | kDecode; break;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << fnv1a64(canonical(config, mask));
    return os.str();
}

}  // namespace dpt
