#include "dpt/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dpt/error.hpp"
#include "dpt/ini.hpp"
#include "dpt/ops.hpp"
#include "dpt/optim.hpp"
#include "dpt/training.hpp"

namespace dpt {
namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

Matrix to_matrix(std::span<const FeatureVector> rows) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(rows.front().size());
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        if (static_cast<Eigen::Index>(r.size()) != d) throw DimensionError("feature vectors differ in length");
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = r[static_cast<std::size_t>(j)];
    }
    return m;
}

void moments(const Matrix& x, Vector& mu, Matrix& cov) {
    mu = x.colwise().mean();
    const Matrix centered = x.rowwise() - mu.transpose();
    const double denom = x.rows() > 1 ? static_cast<double>(x.rows() - 1) : 1.0;
    cov = centered.transpose() * centered / denom;
    cov = 0.5 * (cov + cov.transpose());
}

Matrix psd_sqrt(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
    const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

std::vector<FeatureVector> feature_rows(const WorldSpec& world, std::span<const LabeledSequence> data) {
    std::vector<FeatureVector> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(features(world, s.tokens));
    return out;
}

void append(std::vector<LabeledSequence>& dst, std::vector<LabeledSequence> src) {
    dst.insert(dst.end(), std::make_move_iterator(src.begin()), std::make_move_iterator(src.end()));
}

nlohmann::json score_json(const OracleScore& s) {
    return {{"samples", s.samples}, {"class_accuracy", s.class_accuracy}, {"domain_accuracy", s.domain_accuracy}};
}

}  // namespace

std::size_t feature_dim(const WorldSpec& world) {
    const auto n = static_cast<std::size_t>(world.token_count());
    const auto g = static_cast<std::size_t>(world.params().glyph_count);
    const auto p = static_cast<std::size_t>(world.params().palette_count);
    return n * g + n * p + g * p;
}

FeatureVector features(const WorldSpec& world, std::span<const int> tokens) {
    const auto n = static_cast<std::size_t>(world.token_count());
    const auto g = static_cast<std::size_t>(world.params().glyph_count);
    const auto p = static_cast<std::size_t>(world.params().palette_count);
    if (tokens.size() != n) throw DimensionError("feature extraction expects " + std::to_string(n) + " tokens");
    FeatureVector f(feature_dim(world), 0.0);
    const double unit = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int id = tokens[i];
        if (id < 0 || id >= world.vocab_size()) throw InvalidArgument("token id " + std::to_string(id) + " is not a codebook id");
        const auto gl = static_cast<std::size_t>(world.glyph_of(id));
        const auto pa = static_cast<std::size_t>(world.palette_of(id));
        f[i * g + gl] = 1.0;
        f[n * g + i * p + pa] = 1.0;
        f[n * (g + p) + gl * p + pa] += unit;
    }
    return f;
}

double frechet_distance(std::span<const FeatureVector> a, std::span<const FeatureVector> b) {
    if (a.empty() || b.empty()) throw InvalidArgument("Frechet distance needs two non-empty sets");
    const Matrix xa = to_matrix(a);
    const Matrix xb = to_matrix(b);
    if (xa.cols() != xb.cols()) throw DimensionError("Frechet sets have different feature dimensions");
    Vector mu_a, mu_b;
    Matrix cov_a, cov_b;
    moments(xa, mu_a, cov_a);
    moments(xb, mu_b, cov_b);
    const auto d = xa.cols();
    constexpr double kShrink = 1e-6;
    if (xa.rows() < 2 * d) cov_a.diagonal().array() += kShrink;
    if (xb.rows() < 2 * d) cov_b.diagonal().array() += kShrink;

    const Matrix root_a = psd_sqrt(cov_a);
    Matrix m = root_a * cov_b * root_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
    const double cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    return std::max(value, 0.0);
}

OracleScore oracle_score(const WorldSpec& world, std::span<const LabeledSequence> data, int class_id, int domain_id) {
    OracleScore s;
    s.samples = data.size();
    if (data.empty()) return s;
    std::size_t cls = 0, dom = 0;
    for (const auto& seq : data) {
        const OracleResult r = world.oracle_classify(seq.tokens);
        cls += r.class_id == class_id;
        dom += r.domain_id == domain_id;
    }
    s.class_accuracy = static_cast<double>(cls) / static_cast<double>(data.size());
    s.domain_accuracy = static_cast<double>(dom) / static_cast<double>(data.size());
    return s;
}

AttentionUsage attention_utilization(const Transformer& model, const PrefixSlots& prefix,
                                     std::span<const TokenSequence> probe, AttentionControl mode) {
    if (probe.empty()) throw InvalidArgument("attention probe batch is empty");
    NoGradGuard no_grad;
    std::vector<int> flat;
    for (const auto& s : probe) flat.insert(flat.end(), s.begin(), s.end());
    AttentionTrace trace;
    model.forward(flat, probe.size(), prefix, mode, &trace);
    const std::size_t s = trace.layout.prompt_slots;
    AttentionUsage out;
    double cls = 0.0, prm = 0.0;
    std::size_t dominant = 0;
    for (const Tensor& w : trace.weights) {
        const std::size_t rows = w.dim(0) * w.dim(1);
        const std::size_t m = w.dim(2);
        auto data = w.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double c = data[r * m];
            double p_sum = 0.0, p_max = 0.0;
            for (std::size_t j = 1; j <= s; ++j) {
                p_sum += data[r * m + j];
                p_max = std::max(p_max, data[r * m + j]);
            }
            cls += c;
            prm += p_sum;
            dominant += c >= p_max;
            ++out.cells;
        }
    }
    out.class_mass = cls / static_cast<double>(out.cells);
    out.prompt_mass = prm / static_cast<double>(out.cells);
    out.class_dominant_share = static_cast<double>(dominant) / static_cast<double>(out.cells);
    return out;
}

OracleScore EvalReport::arm_mean(const std::string& arm) const {
    OracleScore out;
    double c = 0.0, d = 0.0;
    for (const auto& r : rows) {
        if (r.arm != arm) continue;
        out.samples += r.score.samples;
        c += r.score.class_accuracy * static_cast<double>(r.score.samples);
        d += r.score.domain_accuracy * static_cast<double>(r.score.samples);
    }
    if (out.samples > 0) {
        out.class_accuracy = c / static_cast<double>(out.samples);
        out.domain_accuracy = d / static_cast<double>(out.samples);
    }
    return out;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["rows"] = nlohmann::json::array();
    std::set<std::string> arms;
    for (const auto& r : rows) {
        nlohmann::json row = score_json(r.score);
        row["arm"] = r.arm;
        row["class"] = r.class_id;
        row["domain"] = r.domain_id;
        j["rows"].push_back(row);
        arms.insert(r.arm);
    }
    for (const auto& a : arms) j["arm_means"][a] = score_json(arm_mean(a));
    auto put = [&](const char* key, const std::optional<double>& v) {
        j["frechet"][key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    put("source", frechet_source);
    put("in_dist", frechet_in_dist);
    put("zero_shot", frechet_zero_shot);
    put("zero_shot_ensemble", frechet_zero_shot_ensemble);
    j["attention"] = {{"class_mass", attention.class_mass},
                      {"prompt_mass", attention.prompt_mass},
                      {"class_dominant_share", attention.class_dominant_share},
                      {"cells", attention.cells}};
    return j.dump(2);
}

std::string EvalReport::to_tsv() const {
    std::ostringstream os;
    os << "kind\tname\tclass\tdomain\tsamples\tclass_accuracy\tdomain_accuracy\tvalue\n";
    for (const auto& r : rows) {
        os << "row\t" << r.arm << '\t' << r.class_id << '\t' << r.domain_id << '\t' << r.score.samples << '\t'
           << format_double(r.score.class_accuracy) << '\t' << format_double(r.score.domain_accuracy) << "\t\n";
    }
    auto metric = [&](const std::string& name, double v) { os << "metric\t" << name << "\t\t\t\t\t\t" << format_double(v) << '\n'; };
    if (frechet_source) metric("frechet_source", *frechet_source);
    if (frechet_in_dist) metric("frechet_in_dist", *frechet_in_dist);
    if (frechet_zero_shot) metric("frechet_zero_shot", *frechet_zero_shot);
    if (frechet_zero_shot_ensemble) metric("frechet_zero_shot_ensemble", *frechet_zero_shot_ensemble);
    metric("attention_class_mass", attention.class_mass);
    metric("attention_prompt_mass", attention.prompt_mass);
    os << "metric\tconfig_hash\t\t\t\t\t\t" << config_hash << '\n';
    return os.str();
}

EvalReport compositional_eval(const EvalInputs& in, const EvalOptions& options) {
    if (!in.world || !in.source || !in.splits) throw InvalidArgument("evaluation needs a world, a source model and splits");
    if (!in.single || in.single->members.empty()) throw InvalidArgument("evaluation needs a tuned prompt");
    const WorldSpec& world = *in.world;
    const DatasetSplits& splits = *in.splits;
    if (splits.zero_shot_classes.empty()) throw InvalidArgument("evaluation needs at least one zero-shot class");

    EvalReport report;
    auto request = [&](int c, SynthMode mode, int prompt_id) {
        SynthRequest r;
        r.class_id = c;
        r.mode = mode;
        r.count = options.samples_per_class;
        r.domain_label = mode == SynthMode::kSource ? options.source_domain : options.target_domain;
        r.prompt_id = prompt_id;
        r.control = options.control;
        return r;
    };

    std::vector<LabeledSequence> source_all, zero_all, ens_all, in_all;
    for (int c : splits.zero_shot_classes) {
        auto src = synthesize(*in.source, nullptr, request(c, SynthMode::kSource, -1), options.decode);
        report.rows.push_back({"source", c, options.target_domain, oracle_score(world, src, c, options.target_domain)});
        append(source_all, std::move(src));

        auto zs = synthesize(*in.source, in.single, request(c, SynthMode::kZeroShot, 0), options.decode);
        report.rows.push_back({"zero_shot", c, options.target_domain, oracle_score(world, zs, c, options.target_domain)});
        append(zero_all, std::move(zs));

        if (in.ensemble && !in.ensemble->members.empty()) {
            auto ens = synthesize(*in.source, in.ensemble, request(c, SynthMode::kZeroShot, 1), options.decode);
            report.rows.push_back(
                {"zero_shot_ensemble", c, options.target_domain, oracle_score(world, ens, c, options.target_domain)});
            append(ens_all, std::move(ens));
        }
    }
    const std::size_t rows = in.single->members.front().affinity.target_count();
    if (splits.target_classes.size() != rows) {
        throw DimensionError("tuned prompt has " + std::to_string(rows) + " target classes, splits list " +
                             std::to_string(splits.target_classes.size()));
    }
    std::set<int> seen;
    for (std::size_t r = 0; r < rows; ++r) {
        const int c = splits.target_classes[r];
        seen.insert(c);
        auto synth = synthesize(*in.source, in.single, request(static_cast<int>(r), SynthMode::kInDistribution, 0),
                                options.decode);
        for (auto& s : synth) s.class_id = c;
        report.rows.push_back({"in_dist", c, options.target_domain, oracle_score(world, synth, c, options.target_domain)});
        append(in_all, std::move(synth));
    }

    const auto ref_zero = filter_classes(splits.reference, splits.zero_shot_classes);
    const std::vector<int> seen_list(seen.begin(), seen.end());
    const auto ref_seen = filter_classes(splits.reference, seen_list);
    if (!ref_zero.empty()) {
        const auto ref_f = feature_rows(world, ref_zero);
        report.frechet_source = frechet_distance(feature_rows(world, source_all), ref_f);
        report.frechet_zero_shot = frechet_distance(feature_rows(world, zero_all), ref_f);
        if (!ens_all.empty()) report.frechet_zero_shot_ensemble = frechet_distance(feature_rows(world, ens_all), ref_f);
    }
    if (!ref_seen.empty() && !in_all.empty()) {
        report.frechet_in_dist = frechet_distance(feature_rows(world, in_all), feature_rows(world, ref_seen));
    }

    // Attention probe: masked real target sequences of held-out classes under
    // zero-shot conditioning.
    if (!ref_zero.empty()) {
        const std::size_t probe_n = std::min<std::size_t>(64, ref_zero.size());
        Rng probe_rng = make_rng(options.decode.seed, "attention-probe");
        std::vector<TokenSequence> probe;
        std::vector<int> classes;
        for (std::size_t i = 0; i < probe_n; ++i) {
            const auto& s = ref_zero[(i * ref_zero.size()) / probe_n];
            probe.push_back(mask_tokens(s.tokens, sample_mask(probe_rng, world.token_count()), world.mask_id()));
            classes.push_back(s.class_id);
        }
        PrefixSlots prefix = class_prefix(classes, in.source->class_table);
        prefix.prompt = in.single->members.front().prompt.layer_prompts();
        report.attention = attention_utilization(in.source->model, prefix, probe, options.control);
    }
    return report;
}

std::vector<LabeledSequence> synthesize_all_classes(const SourceModel& source, const PromptEnsemble& prompts,
                                                    int per_class, int domain_label, AttentionControl control,
                                                    const DecodeConfig& decode) {
    std::vector<LabeledSequence> out;
    for (int c = 0; c < source.class_count(); ++c) {
        SynthRequest r;
        r.class_id = c;
        r.mode = SynthMode::kZeroShot;
        r.count = per_class;
        r.domain_label = domain_label;
        r.control = control;
        append(out, synthesize(source, &prompts, r, decode));
    }
    return out;
}

double train_and_test_classifier(const std::vector<FeatureVector>& train_x, const std::vector<int>& train_y,
                                 const std::vector<FeatureVector>& mix_x, const std::vector<int>& mix_y, double ratio,
                                 const std::vector<FeatureVector>& test_x, const std::vector<int>& test_y,
                                 int class_count, const ZsdaOptions& options) {
    if (train_x.empty() || test_x.empty()) throw InvalidArgument("classifier needs training and test data");
    if (train_x.size() != train_y.size() || mix_x.size() != mix_y.size() || test_x.size() != test_y.size()) {
        throw DimensionError("classifier features and labels differ in count");
    }
    if (ratio > 0.0 && mix_x.empty()) throw InvalidArgument("mixture ratio set without mixture data");
    const std::size_t d = train_x.front().size();
    const auto c = static_cast<std::size_t>(class_count);
    Tensor w = Tensor::zeros({d, c}, true);
    Tensor b = Tensor::zeros({c}, true);
    Adam adam({w, b});
    Rng rng = make_rng(options.seed, "classifier");
    std::uniform_int_distribution<std::size_t> pick_train(0, train_x.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_mix(0, mix_x.empty() ? 0 : mix_x.size() - 1);
    const auto batch = static_cast<std::size_t>(options.batch);
    std::vector<double> xb(batch * d);
    std::vector<int> yb(batch);
    const std::vector<std::uint8_t> all(batch, 1);
    for (int step = 0; step < options.steps; ++step) {
        for (std::size_t i = 0; i < batch; ++i) {
            // Both arms consume the same draws; only the data source differs.
            const double u = uniform01(rng);
            const std::size_t ti = pick_train(rng);
            const std::size_t mi = pick_mix(rng);
            const bool from_mix = u < ratio;
            const FeatureVector& x = from_mix ? mix_x[mi] : train_x[ti];
            std::copy(x.begin(), x.end(), xb.begin() + static_cast<std::ptrdiff_t>(i * d));
            yb[i] = from_mix ? mix_y[mi] : train_y[ti];
        }
        Tensor logits = linear(Tensor({batch, d}, xb), w, b);
        Tensor loss = cross_entropy(logits, yb, all);
        adam.zero_grad();
        loss.backward();
        adam.step(cosine_lr(step, options.steps, options.lr));
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        auto wd = w.data();
        auto bd = b.data();
        int best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c; ++k) {
            double v = bd[k];
            for (std::size_t j = 0; j < d; ++j) v += test_x[i][j] * wd[j * c + k];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(k);
            }
        }
        correct += best == test_y[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test_x.size());
}

ZsdaResult zsda_experiment(const WorldSpec& world, std::span<const LabeledSequence> source_real,
                           std::span<const LabeledSequence> synth, std::span<const LabeledSequence> target_test,
                           const ZsdaOptions& options) {
    if (source_real.empty() || target_test.empty()) throw InvalidArgument("ZSDA needs source and test data");
    if (options.steps < 1 || options.batch < 1) throw InvalidArgument("ZSDA classifier needs steps, batch >= 1");
    std::set<int> source_classes;
    for (const auto& s : source_real) source_classes.insert(s.class_id);
    for (const auto& s : synth) {
        if (!source_classes.count(s.class_id)) {
            throw InvalidArgument("synthesized class " + std::to_string(s.class_id) + " is not a source class");
        }
    }
    for (const auto& s : target_test) {
        if (!source_classes.count(s.class_id)) {
            throw InvalidArgument("test class " + std::to_string(s.class_id) + " is not a source class");
        }
    }
    auto split = [&](std::span<const LabeledSequence> data, std::vector<FeatureVector>& x, std::vector<int>& y) {
        for (const auto& s : data) {
            x.push_back(features(world, s.tokens));
            y.push_back(s.class_id);
        }
    };
    std::vector<FeatureVector> sx, mx, tx;
    std::vector<int> sy, my, ty;
    split(source_real, sx, sy);
    split(synth, mx, my);
    split(target_test, tx, ty);
    ZsdaResult out;
    out.source_only = train_and_test_classifier(sx, sy, mx, my, 0.0, tx, ty, world.class_count(), options);
    out.source_plus_synth =
        train_and_test_classifier(sx, sy, mx, my, mx.empty() ? 0.0 : options.synth_ratio, tx, ty, world.class_count(),
                                  options);
    return out;
}

}  // namespace dpt
