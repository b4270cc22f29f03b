// Command-line driver for the full pipeline: data, pretraining, prompt
// tuning, synthesis, evaluation, the classifier experiment and ablations.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "dpt/checkpoint.hpp"
#include "dpt/config.hpp"
#include "dpt/decoding.hpp"
#include "dpt/error.hpp"
#include "dpt/evaluation.hpp"
#include "dpt/ini.hpp"
#include "dpt/rng.hpp"
#include "dpt/training.hpp"

namespace fs = std::filesystem;
using namespace dpt;

namespace {

struct Context {
    RunConfig config;
    fs::path out;
    WorldSpec world{WorldParams{}};
};

struct Paths {
    fs::path root;
    fs::path data() const { return root / "data"; }
    fs::path manifest() const { return data() / "splits.json"; }
    fs::path source() const { return root / "source.ckpt"; }
    fs::path prompts(PromptMode mode) const {
        return root / (mode == PromptMode::kEnsemble ? "prompts_ensemble.ckpt" : "prompts.ckpt");
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void expect_hash(const std::string& what, const std::string& found, const std::string& expected) {
    if (found != expected) {
        throw ConfigMismatch(what + " was produced under config hash " + found + ", this config expects " + expected);
    }
}

struct Manifest {
    std::string source_hash, target_hash;
    std::vector<int> target_classes, tune_targets, zero_shot_classes;
};

Manifest read_manifest(const Paths& paths) {
    std::ifstream in(paths.manifest());
    if (!in) throw MissingArtifact("no dataset at " + paths.data().string() + "; run gen-data first");
    try {
        const auto j = nlohmann::json::parse(in);
        return {j.at("source_hash"), j.at("target_hash"), j.at("target_classes"), j.at("tune_targets"),
                j.at("zero_shot_classes")};
    } catch (const nlohmann::json::exception& e) {
        throw IoError(paths.manifest().string() + ": " + e.what());
    }
}

// Loads the dataset splits after checking they match the config.
DatasetSplits load_splits(const Context& ctx, bool need_pretrain) {
    const Paths paths{ctx.out};
    const Manifest m = read_manifest(paths);
    expect_hash("source data", m.source_hash, stage_hash(ctx.config, Stage::kSourceData));
    expect_hash("target data", m.target_hash, stage_hash(ctx.config, Stage::kTargetData));
    DatasetSplits s;
    if (need_pretrain) s.pretrain = read_dataset(paths.data() / "pretrain.jsonl");
    s.tune = read_dataset(paths.data() / "tune.jsonl");
    s.reference = read_dataset(paths.data() / "reference.jsonl");
    s.target_classes = m.target_classes;
    s.tune_targets = m.tune_targets;
    s.zero_shot_classes = m.zero_shot_classes;
    return s;
}

SourceModel load_source(const Context& ctx) {
    Rng init = make_rng(ctx.config.seed, "init");
    SourceModel source(ctx.config.resolved_model(), ctx.world.class_count(), init);
    const Checkpoint ck = load_checkpoint(Paths{ctx.out}.source());
    expect_hash("source checkpoint", ck.header.config_hash, stage_hash(ctx.config, Stage::kPretrain));
    restore(ck, source.parameters());
    return source;
}

PromptShape prompt_shape(const RunConfig& c) {
    return {static_cast<std::size_t>(c.protocol.prompt_tokens), static_cast<std::size_t>(c.protocol.bottleneck),
            c.protocol.deep_prompt};
}

TuneOptions tune_options(const RunConfig& c) {
    TuneOptions o = c.tune_options;
    o.control = c.protocol.control;
    return o;
}

// Trains a single prompt over the tuned classes, or a per-sequence ensemble.
PromptEnsemble train_prompts(const Context& ctx, const SourceModel& source, const DatasetSplits& splits,
                             LossLog* log) {
    const RunConfig& c = ctx.config;
    if (c.protocol.mode == PromptMode::kEnsemble) {
        return tune_ensemble(source, ctx.world, splits.tune, prompt_shape(c), c.tune, tune_options(c));
    }
    Rng init = make_rng(c.tune.seed, "prompt-init");
    PromptBundle b = make_bundle(source, splits.target_classes.size(), prompt_shape(c), init);
    LossLog l = tune(source, b, ctx.world, splits.tune, splits.tune_targets, c.tune, tune_options(c));
    if (log) *log = std::move(l);
    return PromptEnsemble{{std::move(b)}};
}

PromptEnsemble load_prompts(const Context& ctx, const SourceModel& source, const DatasetSplits& splits,
                            PromptMode mode) {
    RunConfig c = ctx.config;
    c.protocol.mode = mode;
    const Checkpoint ck = load_checkpoint(Paths{ctx.out}.prompts(mode));
    expect_hash("prompt checkpoint", ck.header.config_hash, stage_hash(c, Stage::kTune));
    PromptEnsemble like;
    Rng init(0);
    if (mode == PromptMode::kEnsemble) {
        for (std::size_t i = 0; i < splits.tune.size(); ++i) like.members.push_back(make_bundle(source, 1, prompt_shape(c), init));
    } else {
        like.members.push_back(make_bundle(source, splits.target_classes.size(), prompt_shape(c), init));
    }
    restore_prompts(ck, like);
    return like;
}

void progress(const char* what, const LossRecord& r, int total) {
    if (r.step % 500 == 0 || r.step + 1 == total) {
        std::cerr << what << " step " << r.step << "/" << total << " loss " << format_double(r.loss) << "\n";
    }
}

int cmd_gen_data(const Context& ctx) {
    const Paths paths{ctx.out};
    const DatasetSplits s = make_splits(ctx.world, ctx.config.split_protocol(), ctx.config.seed);
    fs::create_directories(paths.data());
    ctx.world.save(paths.data() / "world.ini");
    write_dataset(paths.data() / "pretrain.jsonl", s.pretrain);
    write_dataset(paths.data() / "tune.jsonl", s.tune);
    write_dataset(paths.data() / "reference.jsonl", s.reference);
    nlohmann::ordered_json j;
    j["source_hash"] = stage_hash(ctx.config, Stage::kSourceData);
    j["target_hash"] = stage_hash(ctx.config, Stage::kTargetData);
    j["target_classes"] = s.target_classes;
    j["tune_targets"] = s.tune_targets;
    j["zero_shot_classes"] = s.zero_shot_classes;
    j["counts"] = {{"pretrain", s.pretrain.size()}, {"tune", s.tune.size()}, {"reference", s.reference.size()}};
    write_text(paths.manifest(), j.dump(2) + "\n");
    write_text(ctx.out / "config.ini", to_ini(ctx.config));
    std::cout << "pretrain " << s.pretrain.size() << " tune " << s.tune.size() << " reference " << s.reference.size()
              << "\n";
    return 0;
}

int cmd_pretrain(const Context& ctx) {
    const DatasetSplits splits = load_splits(ctx, true);
    Rng init = make_rng(ctx.config.seed, "init");
    SourceModel source(ctx.config.resolved_model(), ctx.world.class_count(), init);
    const int total = ctx.config.pretrain.steps;
    const LossLog log =
        pretrain(source, splits.pretrain, ctx.config.pretrain, [&](const LossRecord& r) { progress("pretrain", r, total); });
    log.write_tsv(ctx.out / "pretrain_loss.tsv");
    save_checkpoint(Paths{ctx.out}.source(), source.parameters(), ctx.config.seed,
                    stage_hash(ctx.config, Stage::kPretrain));
    std::cout << "final loss " << format_double(log.tail_mean(100)) << "\n";
    return 0;
}

int cmd_tune(const Context& ctx) {
    const DatasetSplits splits = load_splits(ctx, false);
    const SourceModel source = load_source(ctx);
    LossLog log;
    const PromptEnsemble prompts = train_prompts(ctx, source, splits, &log);
    if (!log.records.empty()) log.write_tsv(ctx.out / "tune_loss.tsv");
    save_prompts(Paths{ctx.out}.prompts(ctx.config.protocol.mode), prompts, ctx.config.seed, stage_hash(ctx.config, Stage::kTune));
    std::size_t params = 0;
    for (const auto& m : prompts.members) params += m.parameter_count();
    std::cout << "members " << prompts.members.size() << " learnable parameters " << params << "\n";
    if (prompts.members.size() == 1) {
        for (std::size_t r = 0; r < splits.target_classes.size(); ++r) {
            const auto top = predict_classes(prompts.members.front().affinity, static_cast<int>(r), 3);
            std::cout << "target row " << r << " (class " << splits.target_classes[r] << ") top source classes";
            for (int t : top) std::cout << " " << t;
            std::cout << "\n";
        }
    }
    return 0;
}

int cmd_synth(const Context& ctx, const std::string& mode_name, int class_id, int count, const fs::path& file) {
    const DatasetSplits splits = load_splits(ctx, false);
    const SourceModel source = load_source(ctx);
    SynthRequest r;
    r.class_id = class_id;
    r.count = count < 0 ? ctx.config.protocol.samples_per_class : count;
    r.control = ctx.config.protocol.control;
    r.domain_label = ctx.config.protocol.target_domain;
    PromptEnsemble prompts;
    if (mode_name == "source") {
        r.mode = SynthMode::kSource;
        r.domain_label = ctx.config.protocol.source_domain;
        r.prompt_id = -1;
    } else {
        r.mode = mode_name == "in-dist" ? SynthMode::kInDistribution : SynthMode::kZeroShot;
        if (r.mode == SynthMode::kInDistribution && ctx.config.protocol.mode == PromptMode::kEnsemble) {
            throw InvalidArgument("in-distribution synthesis reads the single prompt; set protocol.mode = single");
        }
        prompts = load_prompts(ctx, source, splits, ctx.config.protocol.mode);
    }
    auto out = synthesize(source, r.mode == SynthMode::kSource ? nullptr : &prompts, r, ctx.config.decode);
    if (r.mode == SynthMode::kInDistribution) {
        for (auto& s : out) s.class_id = splits.target_classes.at(static_cast<std::size_t>(class_id));
    }
    const fs::path path = file.empty() ? ctx.out / "synth" / (mode_name + "_class" + std::to_string(class_id) + ".jsonl") : file;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_dataset(path, out);
    const auto score = oracle_score(ctx.world, out, out.empty() ? class_id : out.front().class_id, r.domain_label);
    std::cout << path.string() << ": " << out.size() << " sequences, oracle class " << format_double(score.class_accuracy)
              << " domain " << format_double(score.domain_accuracy) << " (config " << stage_hash(ctx.config, Stage::kSynth)
              << ")\n";
    return 0;
}

EvalOptions eval_options(const RunConfig& c) {
    EvalOptions o;
    o.samples_per_class = c.protocol.samples_per_class;
    o.decode = c.decode;
    o.control = c.protocol.control;
    o.target_domain = c.protocol.target_domain;
    o.source_domain = c.protocol.source_domain;
    return o;
}

int cmd_eval(const Context& ctx) {
    const DatasetSplits splits = load_splits(ctx, false);
    const SourceModel source = load_source(ctx);
    // The single prompt is required; an ensemble tuned under the same config
    // adds the ensemble arm.
    const PromptEnsemble single = load_prompts(ctx, source, splits, PromptMode::kSingle);
    std::optional<PromptEnsemble> ensemble;
    if (fs::exists(Paths{ctx.out}.prompts(PromptMode::kEnsemble))) {
        ensemble = load_prompts(ctx, source, splits, PromptMode::kEnsemble);
    }
    EvalInputs in{&ctx.world, &source, &splits, &single, ensemble ? &*ensemble : nullptr};
    EvalReport report = compositional_eval(in, eval_options(ctx.config));
    report.config_hash = stage_hash(ctx.config, Stage::kSynth);
    write_text(ctx.out / "eval.json", report.to_json() + "\n");
    write_text(ctx.out / "eval.tsv", report.to_tsv());
    for (const char* arm : {"source", "zero_shot", "zero_shot_ensemble", "in_dist"}) {
        if (std::string(arm) == "zero_shot_ensemble" && !ensemble) continue;
        const auto m = report.arm_mean(arm);
        std::cout << arm << ": class " << format_double(m.class_accuracy) << " domain " << format_double(m.domain_accuracy)
                  << "\n";
    }
    if (report.frechet_source) std::cout << "frechet source " << format_double(*report.frechet_source) << "\n";
    if (report.frechet_zero_shot) std::cout << "frechet zero-shot " << format_double(*report.frechet_zero_shot) << "\n";
    return 0;
}

int cmd_zsda(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const DatasetSplits splits = load_splits(ctx, false);
    const SourceModel source = load_source(ctx);
    const PromptEnsemble prompts = load_prompts(ctx, source, splits, c.protocol.mode);
    Rng rng = make_rng(c.seed, "zsda-source");
    std::vector<LabeledSequence> source_real;
    for (int k = 0; k < c.zsda_source_per_class; ++k)
        for (int cl = 0; cl < ctx.world.class_count(); ++cl)
            source_real.push_back(ctx.world.generate(cl, c.protocol.source_domain, rng));
    const auto synth =
        synthesize_all_classes(source, prompts, c.zsda_synth_per_class, c.protocol.target_domain, c.protocol.control, c.decode);
    const ZsdaResult r = zsda_experiment(ctx.world, source_real, synth, splits.reference, c.zsda);
    nlohmann::ordered_json j;
    j["config_hash"] = stage_hash(c, Stage::kSynth);
    j["source_only"] = r.source_only;
    j["source_plus_synth"] = r.source_plus_synth;
    write_text(ctx.out / "zsda.json", j.dump(2) + "\n");
    std::cout << "source only " << format_double(r.source_only) << " source+synth " << format_double(r.source_plus_synth)
              << "\n";
    return 0;
}

int cmd_ablate(const Context& ctx) {
    const RunConfig& base = ctx.config;
    const DatasetSplits splits = load_splits(ctx, false);
    const SourceModel source = load_source(ctx);
    const auto ref = filter_classes(splits.reference, splits.zero_shot_classes);
    std::vector<FeatureVector> ref_f;
    for (const auto& s : ref) ref_f.push_back(features(ctx.world, s.tokens));

    std::ofstream tsv;
    const fs::path path = ctx.out / "ablate.tsv";
    fs::create_directories(ctx.out);
    tsv.open(path);
    if (!tsv) throw IoError("cannot write " + path.string());
    tsv << "bottleneck\tattention_control\tlambda\tunconditional_drop_prompt\tzero_shot_class_accuracy\t"
           "zero_shot_domain_accuracy\tfrechet_zero_shot\tconfig_hash\n";
    std::size_t rows = 0;
    for (int b : base.protocol.bottleneck_grid) {
        for (AttentionControl ctl : {AttentionControl::kOn, AttentionControl::kOff}) {
            Context point{base, ctx.out, ctx.world};
            point.config.protocol.bottleneck = b;
            point.config.protocol.control = ctl;
            point.config.protocol.mode = PromptMode::kSingle;
            const PromptEnsemble prompts = train_prompts(point, source, splits, nullptr);
            for (double lambda : base.protocol.lambda_grid) {
                for (bool drop : {true, false}) {
                    point.config.decode.guidance = lambda;
                    point.config.decode.drop_prompt = drop;
                    std::vector<LabeledSequence> all;
                    double cls = 0, dom = 0;
                    for (int c : splits.zero_shot_classes) {
                        SynthRequest r;
                        r.class_id = c;
                        r.count = base.protocol.samples_per_class;
                        r.control = ctl;
                        r.domain_label = base.protocol.target_domain;
                        auto out = synthesize(source, &prompts, r, point.config.decode);
                        const auto s = oracle_score(ctx.world, out, c, base.protocol.target_domain);
                        cls += s.class_accuracy;
                        dom += s.domain_accuracy;
                        all.insert(all.end(), out.begin(), out.end());
                    }
                    const double n = static_cast<double>(splits.zero_shot_classes.size());
                    std::vector<FeatureVector> f;
                    for (const auto& s : all) f.push_back(features(ctx.world, s.tokens));
                    const std::string fd = ref_f.empty() || f.empty() ? "" : format_double(frechet_distance(f, ref_f));
                    tsv << b << '\t' << (ctl == AttentionControl::kOn ? "on" : "off") << '\t' << format_double(lambda)
                        << '\t' << (drop ? "true" : "false") << '\t' << format_double(cls / n) << '\t'
                        << format_double(dom / n) << '\t' << fd << '\t' << stage_hash(point.config, Stage::kSynth) << '\n';
                    ++rows;
                }
            }
            std::cerr << "ablate: bottleneck " << b << " control " << (ctl == AttentionControl::kOn ? "on" : "off")
                      << " done\n";
        }
    }
    if (!tsv) throw IoError("failed writing " + path.string());
    std::cout << path.string() << ": " << rows << " rows\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Zero-shot domain-adaptive synthesis on a synthetic token world"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    app.add_option("--config", config_path, "Run configuration (INI); defaults apply to absent keys");
    app.add_option("--seed", seed, "Override [run] seed");
    app.add_option("--out", out_dir, "Output directory (default: $DPT_OUT_ROOT or ./runs)");

    auto* gen = app.add_subcommand("gen-data", "Generate the world snapshot and dataset splits");
    auto* pre = app.add_subcommand("pretrain", "Pretrain the source model");
    auto* tun = app.add_subcommand("tune", "Tune the domain prompt with the backbone frozen");
    auto* syn = app.add_subcommand("synth", "Synthesize sequences");
    std::string synth_mode = "zero-shot";
    int synth_class = 0;
    int synth_count = -1;
    std::string synth_file;
    syn->add_option("--mode", synth_mode, "zero-shot | in-dist | source")
        ->check(CLI::IsMember({"zero-shot", "in-dist", "source"}));
    syn->add_option("--class", synth_class, "Source class (zero-shot, source) or tuned row (in-dist)");
    syn->add_option("--count", synth_count, "Sequences to draw (default: protocol.samples_per_class)");
    syn->add_option("--file", synth_file, "Output JSONL path");
    auto* ev = app.add_subcommand("eval", "Compositional evaluation report");
    auto* zs = app.add_subcommand("zsda", "Classifier trained on source vs source plus synthesized data");
    auto* ab = app.add_subcommand("ablate", "Bottleneck x control x guidance x prompt-drop grid");

    CLI11_PARSE(app, argc, argv);

    try {
        Context ctx;
        ctx.config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed) ctx.config.apply_seed(*seed);
        if (!out_dir.empty()) {
            ctx.out = out_dir;
        } else if (const char* root = std::getenv("DPT_OUT_ROOT")) {
            ctx.out = root;
        } else {
            ctx.out = "runs";
        }
        ctx.world = WorldSpec(ctx.config.world);
        if (*gen) return cmd_gen_data(ctx);
        if (*pre) return cmd_pretrain(ctx);
        if (*tun) return cmd_tune(ctx);
        if (*syn) return cmd_synth(ctx, synth_mode, synth_class, synth_count, synth_file);
        if (*ev) return cmd_eval(ctx);
        if (*zs) return cmd_zsda(ctx);
        if (*ab) return cmd_ablate(ctx);
    } catch (const Error& e) {
        std::cerr << "error [" << e.category() << "]: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
