#include "dpt/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "dpt/error.hpp"

namespace dpt {
namespace {

constexpr std::array<char, 4> kMagic{'D', 'P', 'T', '1'};

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
    return out;
}

void write_u64(std::ostream& out, std::uint64_t v) {
    v = to_little(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return to_little(v);
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
    }
    throw MissingArtifact("checkpoint has no tensor named " + name);
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, std::uint64_t seed,
                     const std::string& config_hash) {
    nlohmann::json header;
    header["version"] = 1;
    header["names"] = nlohmann::json::array();
    header["shapes"] = nlohmann::json::array();
    for (const auto& t : tensors) {
        header["names"].push_back(t.name);
        header["shapes"].push_back(t.tensor.shape());
    }
    header["seed"] = seed;
    header["config_hash"] = config_hash;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kMagic.data(), kMagic.size());
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
        for (double v : t.tensor.data()) write_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw IoError(path.string() + " is not a DPT1 checkpoint");
    const std::uint64_t len = read_u64(in);
    if (!in || len > (1u << 28)) throw IoError("corrupt checkpoint header length in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint header in " + path.string());

    Checkpoint ck;
    try {
        const auto header = nlohmann::json::parse(text);
        ck.header.version = header.at("version").get<int>();
        ck.header.names = header.at("names").get<std::vector<std::string>>();
        ck.header.shapes = header.at("shapes").get<std::vector<Shape>>();
        ck.header.seed = header.at("seed").get<std::uint64_t>();
        ck.header.config_hash = header.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
    }
    if (ck.header.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(ck.header.version));
    if (ck.header.names.size() != ck.header.shapes.size()) throw IoError("checkpoint header names/shapes mismatch");
    for (std::size_t i = 0; i < ck.header.names.size(); ++i) {
        std::vector<double> data(shape_numel(ck.header.shapes[i]));
        for (double& v : data) v = std::bit_cast<double>(read_u64(in));
        if (!in) throw IoError("checkpoint payload shorter than its header in " + path.string());
        ck.tensors.push_back({ck.header.names[i], Tensor(ck.header.shapes[i], std::move(data))});
    }
    in.peek();
    if (!in.eof()) throw IoError("checkpoint payload longer than its header in " + path.string());
    return ck;
}

void restore(const Checkpoint& checkpoint, const std::vector<NamedTensor>& targets) {
    for (const auto& t : targets) {
        const Tensor& src = checkpoint.get(t.name);
        if (src.shape() != t.tensor.shape()) {
            throw ConfigMismatch("checkpoint tensor " + t.name + " has shape " + shape_str(src.shape()) +
                                 ", expected " + shape_str(t.tensor.shape()));
        }
        Tensor dst = t.tensor;
        std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
}

namespace {

std::vector<NamedTensor> prefixed(const PromptEnsemble& prompts) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < prompts.members.size(); ++i) {
        for (auto& t : prompts.members[i].parameters()) {
            out.push_back({"member" + std::to_string(i) + "." + t.name, t.tensor});
        }
    }
    return out;
}

}  // namespace

void save_prompts(const std::filesystem::path& path, const PromptEnsemble& prompts, std::uint64_t seed,
                  const std::string& config_hash) {
    if (prompts.members.empty()) throw InvalidArgument("no prompts to save");
    save_checkpoint(path, prefixed(prompts), seed, config_hash);
}

void restore_prompts(const Checkpoint& checkpoint, PromptEnsemble& like) {
    const auto targets = prefixed(like);
    if (targets.size() != checkpoint.tensors.size()) {
        throw ConfigMismatch("prompt file holds " + std::to_string(checkpoint.tensors.size()) + " tensors, expected " +
                             std::to_string(targets.size()));
    }
    restore(checkpoint, targets);
}

}  // namespace dpt
