#include "widecorrect/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>

#include "widecorrect/errors.hpp"

namespace widecorrect {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr std::uint64_t kMaxManifestBytes = 64ull << 20;

}  // namespace

json config_to_json(const ModelConfig& c) {
    return {{"input_h", c.input_h},
            {"input_w", c.input_w},
            {"input_channels", c.input_channels},
            {"patch_size", c.patch_size},
            {"base_channels", c.base_channels},
            {"stage_depths", c.stage_depths},
            {"bottleneck_depth", c.bottleneck_depth},
            {"head_count", c.head_count},
            {"head_dim", c.head_dim},
            {"window_h", c.window_h},
            {"window_w", c.window_w},
            {"mlp_ratio", c.mlp_ratio},
            {"dcm_growth", c.dcm_growth}};
}

ModelConfig config_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("model config must be a JSON object");
    ModelConfig c;
    static const std::set<std::string> known = {"input_h",    "input_w",          "input_channels", "patch_size",
                                                "base_channels", "stage_depths", "bottleneck_depth", "head_count",
                                                "head_dim",   "window_h",         "window_w",       "mlp_ratio",
                                                "dcm_growth"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw InvalidArgument("model config: unknown key '" + key + "'");
    }
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
        };
        get("input_h", c.input_h);
        get("input_w", c.input_w);
        get("input_channels", c.input_channels);
        get("patch_size", c.patch_size);
        get("base_channels", c.base_channels);
        get("stage_depths", c.stage_depths);
        get("bottleneck_depth", c.bottleneck_depth);
        get("head_count", c.head_count);
        get("head_dim", c.head_dim);
        get("window_h", c.window_h);
        get("window_w", c.window_w);
        get("mlp_ratio", c.mlp_ratio);
        get("dcm_growth", c.dcm_growth);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const fs::path& path, const ModelConfig& config, const ModelWeights<float>& weights) {
    if (weights.schema() != parameter_schema(config)) {
        throw InvalidArgument("save_checkpoint: weights do not match the config schema");
    }
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const ParamSpec& p : weights.schema()) {
        tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}});
        offset += p.numel() * sizeof(float);
    }
    const json manifest = {
        {"format_version", kCheckpointVersion}, {"config", config_to_json(config)}, {"tensors", tensors}};
    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string(), "cannot open for writing");
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto flat = weights.flat();
    out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (!out) throw DataError(path.string(), "write failed");
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string(), "cannot open for reading");
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) throw DataError(path.string(), "truncated header");
    if (len == 0 || len > kMaxManifestBytes) throw DataError(path.string(), "implausible manifest length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError(path.string(), "truncated manifest");

    Checkpoint ck;
    try {
        const json manifest = json::parse(text);
        const int version = manifest.at("format_version").get<int>();
        if (version != kCheckpointVersion) {
            throw DataError(path.string(), "unsupported checkpoint version " + std::to_string(version));
        }
        ck.config = config_from_json(manifest.at("config"));
        const auto schema = parameter_schema(ck.config);
        const json& tensors = manifest.at("tensors");
        if (!tensors.is_array() || tensors.size() != schema.size()) {
            throw DataError(path.string(), "tensor table does not match the config schema");
        }
        std::uint64_t offset = 0;
        for (std::size_t i = 0; i < schema.size(); ++i) {
            const json& t = tensors[i];
            if (t.at("name").get<std::string>() != schema[i].name ||
                t.at("shape").get<std::vector<int>>() != schema[i].shape ||
                t.at("offset").get<std::uint64_t>() != offset) {
                throw DataError(path.string(), "tensor entry " + std::to_string(i) + " (" +
                                                   t.at("name").get<std::string>() + ") does not match the schema");
            }
            offset += schema[i].numel() * sizeof(float);
        }
        ck.weights = ModelWeights<float>(schema);
    } catch (const json::exception& e) {
        throw DataError(path.string(), std::string("malformed manifest: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw DataError(path.string(), std::string("invalid manifest: ") + e.what());
    }
    auto flat = ck.weights.flat();
    if (!in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(float)))) {
        throw DataError(path.string(), "truncated tensor payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string(), "trailing bytes after payload");
    if (!ck.weights.all_finite()) throw DataError(path.string(), "non-finite parameter value");
    return ck;
}

}  // namespace widecorrect
